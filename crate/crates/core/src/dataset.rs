//! Triplet manifests, candidate corpora, the synthetic compositional-edit task
//! and the binary embedding cache.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const PAD: &str = "<pad>";
pub const ADD: &str = "ADD";
pub const REMOVE: &str = "REMOVE";
pub const MODIFY: &str = "MODIFY";

/// Caption length of every synthetic edit program.
pub const PROGRAM_LEN: usize = 3;

const CACHE_MAGIC: &[u8; 8] = b"SPRCEMB1";

/// Token ids of a relative caption.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, max_len: usize, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > max_len {
            return Err(Error::Length { len: ids.len(), max: max_len });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Closed token list; line number in the vocabulary file is the token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse { line: i + 1, msg: format!("invalid token {t:?}") });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Vec<&str> {
        seq.ids().iter().map(|&i| self.tokens[i].as_str()).collect()
    }
}

/// One composed query: reference image, relative caption, target image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query_id: String,
    pub reference_id: String,
    pub caption: TokenSequence,
    pub target_id: String,
    /// Curated candidate subset; contains the target, excludes the reference.
    pub subset_ids: Option<Vec<String>>,
}

impl Triplet {
    fn check_subset(&self) -> std::result::Result<(), String> {
        if let Some(s) = &self.subset_ids {
            if s.len() < 2 {
                return Err("subset must list at least two images".into());
            }
            if !s.contains(&self.target_id) {
                return Err(format!("subset does not contain target {}", self.target_id));
            }
            if s.contains(&self.reference_id) {
                return Err(format!("subset contains reference {}", self.reference_id));
            }
        }
        Ok(())
    }
}

/// Patch features of one image, `[n_patches × d_img]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    patches: Mat<f32>,
}

impl ImageFeatures {
    pub fn new(patches: Mat<f32>) -> Result<Self> {
        if patches.rows() == 0 || patches.cols() == 0 {
            return Err(Error::Shape("image features need at least one patch and one column".into()));
        }
        if !patches.is_finite() {
            return Err(Error::Numeric("image features contain non-finite values".into()));
        }
        Ok(Self { patches })
    }

    /// Skips validation; encoders re-check finiteness.
    pub fn new_unchecked(patches: Mat<f32>) -> Self {
        Self { patches }
    }

    pub fn patches(&self) -> &Mat<f32> {
        &self.patches
    }

    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// Candidate images in a fixed order; position is the candidate index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    ids: Vec<String>,
    features: Vec<ImageFeatures>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, features: ImageFeatures) -> Result<()> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::Domain(format!("duplicate image id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.features.push(features);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&ImageFeatures> {
        self.position(id).map(|i| &self.features[i])
    }

    pub fn features(&self, idx: usize) -> &ImageFeatures {
        &self.features[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ImageFeatures)> {
        self.ids.iter().zip(&self.features)
    }

    /// Stores every image as one row of flattened patches in the cache format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n_patches, d_img) = self.patch_shape()?;
        let mut flat = Mat::zeros(self.len(), n_patches * d_img);
        for (i, f) in self.features.iter().enumerate() {
            if f.patches().shape() != (n_patches, d_img) {
                return Err(Error::Shape(format!("image {} has a different patch shape", self.ids[i])));
            }
            flat.row_mut(i).copy_from_slice(f.patches().data());
        }
        write_embedding_cache(path, &self.ids, &flat)
    }

    pub fn load(path: &Path, n_patches: usize) -> Result<Self> {
        let (ids, flat) = read_embedding_cache(path)?;
        if n_patches == 0 || flat.cols() % n_patches != 0 {
            return Err(Error::Shape(format!("rows of width {} do not split into {n_patches} patches", flat.cols())));
        }
        let d_img = flat.cols() / n_patches;
        let mut corpus = Corpus::new();
        for (i, id) in ids.into_iter().enumerate() {
            let patches = Mat::from_vec(n_patches, d_img, flat.row(i).to_vec())?;
            corpus.push(id, ImageFeatures::new(patches)?)?;
        }
        Ok(corpus)
    }

    /// `(n_patches, d_img)` shared by all images.
    pub fn patch_shape(&self) -> Result<(usize, usize)> {
        self.features
            .first()
            .map(|f| f.patches().shape())
            .ok_or_else(|| Error::Domain("empty corpus".into()))
    }
}

/// Parses a tab-separated triplet manifest.
///
/// Fields: `query_id`, `reference_id`, space-separated caption words,
/// `target_id`, optional comma-separated subset ids. Blank lines are skipped.
pub fn parse_triplets(
    text: &str,
    vocab: &Vocabulary,
    max_caption_len: usize,
    corpus: Option<&Corpus>,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 or 5 tab-separated fields, found {}", fields.len()),
            });
        }
        for (name, f) in ["query_id", "reference_id", "caption", "target_id"].iter().zip(&fields) {
            if f.trim().is_empty() {
                return Err(Error::Parse { line, msg: format!("empty {name} field") });
            }
        }
        let mut ids = Vec::new();
        for w in fields[2].split_whitespace() {
            let id = vocab.id(w).ok_or_else(|| Error::Vocabulary { line, token: w.to_string() })?;
            ids.push(id);
        }
        let caption = TokenSequence::new(ids, max_caption_len, vocab.len())
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let subset_ids = match fields.get(4).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(s.split(',').map(|x| x.trim().to_string()).collect::<Vec<_>>()),
        };
        let t = Triplet {
            query_id: fields[0].to_string(),
            reference_id: fields[1].to_string(),
            caption,
            target_id: fields[3].trim().to_string(),
            subset_ids,
        };
        t.check_subset().map_err(|msg| Error::Parse { line, msg })?;
        if let Some(c) = corpus {
            let mut referenced = vec![&t.reference_id, &t.target_id];
            referenced.extend(t.subset_ids.iter().flatten());
            for id in referenced {
                if c.position(id).is_none() {
                    return Err(Error::Referential(format!("line {line}: image {id} is not in the corpus")));
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_triplets(
    path: &Path,
    vocab: &Vocabulary,
    max_caption_len: usize,
    corpus: Option<&Corpus>,
) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text, vocab, max_caption_len, corpus)
}

pub fn format_triplets(triplets: &[Triplet], vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&t.query_id);
        s.push('\t');
        s.push_str(&t.reference_id);
        s.push('\t');
        s.push_str(&vocab.decode(&t.caption).join(" "));
        s.push('\t');
        s.push_str(&t.target_id);
        if let Some(sub) = &t.subset_ids {
            s.push('\t');
            s.push_str(&sub.join(","));
        }
        s.push('\n');
    }
    s
}

pub fn save_triplets(path: &Path, triplets: &[Triplet], vocab: &Vocabulary) -> Result<()> {
    write_atomic(path, format_triplets(triplets, vocab).as_bytes())
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes ids and a row-major `binary32` matrix in the `SPRCEMB1` layout.
pub fn encode_embedding_cache(ids: &[String], embeddings: &Mat<f32>) -> Result<Vec<u8>> {
    if ids.len() != embeddings.rows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), embeddings.rows())));
    }
    if embeddings.cols() == 0 {
        return Err(Error::Shape("embedding dimension must be at least 1".into()));
    }
    let n = u32::try_from(ids.len()).map_err(|_| Error::Domain("too many ids".into()))?;
    let d = u32::try_from(embeddings.cols()).map_err(|_| Error::Domain("dimension too large".into()))?;
    let mut out = Vec::with_capacity(16 + embeddings.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for id in ids {
        if id.as_bytes().contains(&0) {
            return Err(Error::Domain(format!("id {id:?} contains a NUL byte")));
        }
        out.extend_from_slice(id.as_bytes());
        out.push(0);
    }
    for v in embeddings.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embedding_cache(bytes: &[u8]) -> Result<(Vec<String>, Mat<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 16, found: bytes.len() });
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated { expected: 16, found: bytes.len() });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if d == 0 {
        return Err(Error::Format("embedding dimension is zero".into()));
    }
    let mut pos = 16;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let end = bytes[pos..].iter().position(|&b| b == 0).ok_or(Error::Truncated {
            expected: bytes.len() + 1,
            found: bytes.len(),
        })?;
        let id = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
        pos += end + 1;
    }
    let expected = pos + n * d * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((ids, Mat::from_vec(n, d, data)?))
}

pub fn write_embedding_cache(path: &Path, ids: &[String], embeddings: &Mat<f32>) -> Result<()> {
    write_atomic(path, &encode_embedding_cache(ids, embeddings)?)
}

pub fn read_embedding_cache(path: &Path) -> Result<(Vec<String>, Mat<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding_cache(&bytes)
}

// ---------------------------------------------------------------------------
// Synthetic compositional-edit task
// ---------------------------------------------------------------------------

/// Proportions of edit kinds drawn by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditMix {
    pub add: f64,
    pub remove: f64,
    pub modify: f64,
}

impl EditMix {
    pub fn uniform() -> Self {
        Self { add: 1.0 / 3.0, remove: 1.0 / 3.0, modify: 1.0 / 3.0 }
    }

    fn weight(&self, kind: EditKind) -> f64 {
        match kind {
            EditKind::Add => self.add,
            EditKind::Remove => self.remove,
            EditKind::Modify => self.modify,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_slots: usize,
    pub n_object_types: usize,
    pub n_attr_values: usize,
    pub edit_mix: EditMix,
    pub corpus_size: usize,
    /// Upper bound on emitted triplets; fewer when the corpus admits fewer edits.
    pub n_triplets: usize,
    pub d_img: usize,
    /// Size of each per-query candidate subset (target included).
    pub k_subset: usize,
    /// Edits proposed per growth step; the one that leaves the corpus with the
    /// most edit pairs, balanced across the mix, is kept. 1 grows at random.
    pub growth_candidates: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_slots: 3,
            n_object_types: 8,
            n_attr_values: 4,
            edit_mix: EditMix::uniform(),
            corpus_size: 64,
            n_triplets: 512,
            d_img: 16,
            k_subset: 6,
            growth_candidates: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_slots", self.n_slots),
            ("n_object_types", self.n_object_types),
            ("n_attr_values", self.n_attr_values),
            ("corpus_size", self.corpus_size),
            ("n_triplets", self.n_triplets),
            ("d_img", self.d_img),
            ("k_subset", self.k_subset),
            ("growth_candidates", self.growth_candidates),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let m = self.edit_mix;
        if [m.add, m.remove, m.modify].iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("edit_mix proportions must be non-negative".into()));
        }
        if (m.add + m.remove + m.modify - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "edit_mix proportions sum to {}, expected 1",
                m.add + m.remove + m.modify
            )));
        }
        if self.n_slots > self.n_object_types {
            return Err(Error::Config(format!(
                "{} slots cannot hold distinct objects from {} types",
                self.n_slots, self.n_object_types
            )));
        }
        if self.corpus_size < 2 {
            return Err(Error::Config(
                "corpus_size must be at least 2 to host a reference and a distinct target".into(),
            ));
        }
        let possible = self.distinct_images();
        if (self.corpus_size as f64) > possible {
            return Err(Error::Config(format!(
                "corpus_size {} exceeds the {possible} distinct images the slot space allows",
                self.corpus_size
            )));
        }
        Ok(())
    }

    /// Number of distinct slot multisets with at least one object.
    fn distinct_images(&self) -> f64 {
        let mut total = 0.0;
        let mut choose = 1.0;
        for k in 1..=self.n_slots {
            choose = choose * (self.n_object_types - k + 1) as f64 / k as f64;
            total += choose * (self.n_attr_values as f64).powi(k as i32);
        }
        total
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens = vec![PAD.to_string(), ADD.to_string(), REMOVE.to_string(), MODIFY.to_string()];
        tokens.extend((0..self.n_object_types).map(|o| format!("obj{o}")));
        tokens.extend((0..self.n_attr_values).map(|a| format!("attr{a}")));
        Vocabulary::new(tokens).expect("generated tokens are unique")
    }
}

/// A slot holds nothing or one `(object, attribute)` pair.
pub type Slot = Option<(usize, usize)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditKind {
    Add,
    Remove,
    Modify,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [EditKind::Add, EditKind::Remove, EditKind::Modify];

    pub fn token(self) -> &'static str {
        match self {
            EditKind::Add => ADD,
            EditKind::Remove => REMOVE,
            EditKind::Modify => MODIFY,
        }
    }

    /// Kind of the edit leading back from target to reference.
    pub fn inverse(self) -> Self {
        match self {
            EditKind::Add => EditKind::Remove,
            EditKind::Remove => EditKind::Add,
            EditKind::Modify => EditKind::Modify,
        }
    }

    /// Kind of a synthetic caption, read from its first token.
    pub fn of_caption(caption: &TokenSequence, vocab: &Vocabulary) -> Option<Self> {
        match vocab.token(*caption.ids().first()?)? {
            ADD => Some(EditKind::Add),
            REMOVE => Some(EditKind::Remove),
            MODIFY => Some(EditKind::Modify),
            _ => None,
        }
    }
}

/// A three-token edit program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Edit {
    Add { object: usize, attr: usize },
    Remove { object: usize },
    Modify { object: usize, attr: usize },
}

impl Edit {
    pub fn kind(&self) -> EditKind {
        match self {
            Edit::Add { .. } => EditKind::Add,
            Edit::Remove { .. } => EditKind::Remove,
            Edit::Modify { .. } => EditKind::Modify,
        }
    }

    /// Applies the program; `None` when it is not applicable to `slots`.
    pub fn apply(&self, slots: &[Slot]) -> Option<Vec<Slot>> {
        let holder = |o: usize| slots.iter().position(|s| matches!(s, Some((x, _)) if *x == o));
        let mut out = slots.to_vec();
        match *self {
            Edit::Add { object, attr } => {
                if holder(object).is_some() {
                    return None;
                }
                let empty = slots.iter().position(Option::is_none)?;
                out[empty] = Some((object, attr));
            }
            Edit::Remove { object } => {
                out[holder(object)?] = None;
            }
            Edit::Modify { object, attr } => {
                let i = holder(object)?;
                if out[i] == Some((object, attr)) {
                    return None;
                }
                out[i] = Some((object, attr));
            }
        }
        Some(out)
    }

    pub fn to_words(&self) -> [String; 3] {
        match *self {
            Edit::Add { object, attr } => [ADD.into(), format!("obj{object}"), format!("attr{attr}")],
            Edit::Remove { object } => [REMOVE.into(), format!("obj{object}"), PAD.into()],
            Edit::Modify { object, attr } => [MODIFY.into(), format!("obj{object}"), format!("attr{attr}")],
        }
    }

    pub fn from_caption(caption: &TokenSequence, vocab: &Vocabulary) -> Option<Self> {
        let words = vocab.decode(caption);
        if words.len() != PROGRAM_LEN {
            return None;
        }
        let object = words[1].strip_prefix("obj")?.parse().ok()?;
        let attr = || words[2].strip_prefix("attr")?.parse().ok();
        match words[0] {
            ADD => Some(Edit::Add { object, attr: attr()? }),
            REMOVE if words[2] == PAD => Some(Edit::Remove { object }),
            MODIFY => Some(Edit::Modify { object, attr: attr()? }),
            _ => None,
        }
    }

    /// Every program of `kind` applicable to `slots`.
    fn candidates(kind: EditKind, slots: &[Slot], spec: &SyntheticSpec) -> Vec<Edit> {
        let present: Vec<(usize, usize)> = slots.iter().flatten().copied().collect();
        match kind {
            EditKind::Add => {
                if !slots.iter().any(Option::is_none) {
                    return Vec::new();
                }
                let mut v = Vec::new();
                for object in 0..spec.n_object_types {
                    if present.iter().all(|&(o, _)| o != object) {
                        v.extend((0..spec.n_attr_values).map(|attr| Edit::Add { object, attr }));
                    }
                }
                v
            }
            EditKind::Remove => present.iter().map(|&(object, _)| Edit::Remove { object }).collect(),
            EditKind::Modify => present
                .iter()
                .flat_map(|&(object, cur)| {
                    (0..spec.n_attr_values).filter(move |&a| a != cur).map(move |attr| Edit::Modify { object, attr })
                })
                .collect(),
        }
    }
}

/// Order-free identity of an image's contents.
pub fn slot_key(slots: &[Slot]) -> Vec<Slot> {
    let mut k = slots.to_vec();
    k.sort();
    k
}

/// Size of the multiset intersection of two images' occupied slots.
pub fn slot_overlap(a: &[Slot], b: &[Slot]) -> usize {
    let mut rest: Vec<(usize, usize)> = b.iter().flatten().copied().collect();
    let mut n = 0;
    for x in a.iter().flatten() {
        if let Some(i) = rest.iter().position(|y| y == x) {
            rest.swap_remove(i);
            n += 1;
        }
    }
    n
}

/// Generated task with its ground-truth slot contents.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub corpus: Corpus,
    pub triplets: Vec<Triplet>,
    pub vocab: Vocabulary,
    /// Slot contents of each corpus image, in patch order.
    pub slots: Vec<Vec<Slot>>,
    /// Row 0 is EMPTY; row `1 + o·n_attr + a` encodes `(o, a)`.
    pub codebook: Mat<f32>,
}

impl SyntheticTask {
    pub fn code(&self, slot: Slot) -> usize {
        slot_code(slot, self.spec.n_attr_values)
    }

    /// Recovers slot contents from features by exact codebook lookup.
    pub fn decode_slots(&self, features: &ImageFeatures) -> Result<Vec<Slot>> {
        let p = features.patches();
        (0..p.rows())
            .map(|r| {
                let row = p.row(r);
                let code = (0..self.codebook.rows())
                    .find(|&c| self.codebook.row(c) == row)
                    .ok_or_else(|| Error::Domain(format!("patch {r} matches no codebook entry")))?;
                Ok(if code == 0 {
                    None
                } else {
                    Some(((code - 1) / self.spec.n_attr_values, (code - 1) % self.spec.n_attr_values))
                })
            })
            .collect()
    }

    /// Triplets whose caption is one of `kinds`.
    pub fn filter_kinds(&self, kinds: &[EditKind]) -> Vec<Triplet> {
        self.triplets
            .iter()
            .filter(|t| EditKind::of_caption(&t.caption, &self.vocab).is_some_and(|k| kinds.contains(&k)))
            .cloned()
            .collect()
    }
}

fn slot_code(slot: Slot, n_attr: usize) -> usize {
    match slot {
        None => 0,
        Some((o, a)) => 1 + o * n_attr + a,
    }
}

fn draw_kind(mix: &EditMix, allowed: &[EditKind], rng: &mut ChaCha8Rng) -> Option<EditKind> {
    let total: f64 = allowed.iter().map(|&k| mix.weight(k)).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for &k in allowed {
        let w = mix.weight(k);
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return Some(k);
        }
        u -= w;
    }
    allowed.iter().rev().copied().find(|&k| mix.weight(k) > 0.0)
}

fn random_image(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Slot> {
    let k = rng.random_range(1..=spec.n_slots);
    let mut objects: Vec<usize> = (0..spec.n_object_types).collect();
    objects.shuffle(rng);
    let mut slots: Vec<Slot> = vec![None; spec.n_slots];
    for (i, &o) in objects.iter().take(k).enumerate() {
        slots[i] = Some((o, rng.random_range(0..spec.n_attr_values)));
    }
    slots
}

/// Builds the corpus, captions and vocabulary. A pure function of `spec`.
///
/// The corpus grows by applying random edits to existing images and
/// inserting unseen results, so every image is reachable by some program.
/// Triplets are then drawn from all (reference, program) pairs whose result is
/// in the corpus, with edit kinds weighted by `edit_mix`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = spec.vocabulary();
    let active: Vec<EditKind> = EditKind::ALL.iter().copied().filter(|&k| spec.edit_mix.weight(k) > 0.0).collect();

    let mut images: Vec<Vec<Slot>> = Vec::with_capacity(spec.corpus_size);
    let mut seen: HashSet<Vec<Slot>> = HashSet::new();
    let mut edge_counts = [0usize; 3];
    let mut stalled = 0usize;
    let max_attempts = 10_000 + 1_000 * spec.corpus_size;
    let mut attempts = 0usize;
    while images.len() < spec.corpus_size {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "could only place {} of {} images; the slot space is too small for this edit mix",
                images.len(),
                spec.corpus_size
            )));
        }
        if images.is_empty() || stalled > 50 {
            stalled = 0;
            let img = random_image(spec, &mut rng);
            if seen.insert(slot_key(&img)) {
                images.push(img);
            }
            continue;
        }
        let mut best: Option<((f64, usize), Vec<Slot>)> = None;
        for _ in 0..spec.growth_candidates {
            let reference = &images[rng.random_range(0..images.len())];
            let Some(kind) = draw_kind(&spec.edit_mix, &active, &mut rng) else {
                return Err(Error::Config("edit_mix has no positive proportion".into()));
            };
            let options = Edit::candidates(kind, reference, spec);
            if options.is_empty() {
                continue;
            }
            let edit = options[rng.random_range(0..options.len())];
            let target = edit.apply(reference).expect("candidate edits apply");
            if seen.contains(&slot_key(&target)) {
                continue;
            }
            let new_edges = corpus_edges(&target, &seen, &active, spec);
            let mut after = edge_counts;
            for (a, n) in after.iter_mut().zip(new_edges) {
                *a += n;
            }
            let score = (balanced_capacity(&after, &spec.edit_mix, &active), new_edges.iter().sum::<usize>());
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, target));
            }
        }
        match best {
            Some((_, mut target)) => {
                let new_edges = corpus_edges(&target, &seen, &active, spec);
                for (a, n) in edge_counts.iter_mut().zip(new_edges) {
                    *a += n;
                }
                seen.insert(slot_key(&target));
                target.shuffle(&mut rng);
                images.push(target);
                stalled = 0;
            }
            None => stalled += 1,
        }
    }

    let by_key: HashMap<Vec<Slot>, usize> = images.iter().enumerate().map(|(i, s)| (slot_key(s), i)).collect();
    let mut pools: HashMap<EditKind, Vec<(usize, Edit, usize)>> = HashMap::new();
    for (ri, slots) in images.iter().enumerate() {
        for &kind in &active {
            for edit in Edit::candidates(kind, slots, spec) {
                let target = edit.apply(slots).expect("candidate edits apply");
                if let Some(&ti) = by_key.get(&slot_key(&target)) {
                    pools.entry(kind).or_default().push((ri, edit, ti));
                }
            }
        }
    }
    if pools.values().all(Vec::is_empty) {
        return Err(Error::Config("the generated corpus admits no edit with an in-corpus target".into()));
    }

    let ids: Vec<String> = (0..images.len()).map(|i| format!("img{i:04}")).collect();
    // Stop at the first draw whose pool is exhausted so the emitted kinds follow the mix.
    let mut drawn = Vec::new();
    while drawn.len() < spec.n_triplets {
        let Some(kind) = draw_kind(&spec.edit_mix, &active, &mut rng) else { break };
        let Some(pool) = pools.get_mut(&kind).filter(|p| !p.is_empty()) else { break };
        let pick = rng.random_range(0..pool.len());
        drawn.push(pool.swap_remove(pick));
    }

    let mut triplets = Vec::with_capacity(drawn.len());
    for (qi, (ri, edit, ti)) in drawn.into_iter().enumerate() {
        let words = edit.to_words();
        let caption_ids = words.iter().map(|w| vocab.id(w).expect("generated word")).collect();
        let caption = TokenSequence::new(caption_ids, PROGRAM_LEN, vocab.len())?;
        let subset_ids = hardest_subset(&images, ri, ti, spec.k_subset).map(|s| s.into_iter().map(|i| ids[i].clone()).collect());
        triplets.push(Triplet {
            query_id: format!("q{qi:05}"),
            reference_id: ids[ri].clone(),
            caption,
            target_id: ids[ti].clone(),
            subset_ids,
        });
    }

    let n_codes = 1 + spec.n_object_types * spec.n_attr_values;
    let codebook: Mat<f32> = Mat::randn(n_codes, spec.d_img, 1.0, &mut rng);
    let mut corpus = Corpus::new();
    for (id, slots) in ids.iter().zip(&images) {
        let mut patches = Mat::zeros(spec.n_slots, spec.d_img);
        for (r, &s) in slots.iter().enumerate() {
            patches.row_mut(r).copy_from_slice(codebook.row(slot_code(s, spec.n_attr_values)));
        }
        corpus.push(id.clone(), ImageFeatures::new(patches)?)?;
    }

    Ok(SyntheticTask { spec: spec.clone(), corpus, triplets, vocab, slots: images, codebook })
}

/// Directed edges (by kind, indexed like [`EditKind::ALL`]) that adding
/// `slots` would create between it and the images in `seen`.
fn corpus_edges(slots: &[Slot], seen: &HashSet<Vec<Slot>>, active: &[EditKind], spec: &SyntheticSpec) -> [usize; 3] {
    // Every kind is enumerated: an edge into `slots` may only be reachable as
    // the inverse of a kind the mix disables.
    let mut counts = [0usize; 3];
    for kind in EditKind::ALL {
        for edit in Edit::candidates(kind, slots, spec) {
            if edit.apply(slots).is_some_and(|t| seen.contains(&slot_key(&t))) {
                for k in [kind, kind.inverse()] {
                    if active.contains(&k) {
                        counts[k as usize] += 1;
                    }
                }
            }
        }
    }
    counts
}

/// Triplets a pool with these edge counts can supply while honouring the mix.
fn balanced_capacity(counts: &[usize; 3], mix: &EditMix, active: &[EditKind]) -> f64 {
    active.iter().map(|&k| counts[k as usize] as f64 / mix.weight(k)).fold(f64::INFINITY, f64::min)
}

/// Target plus the `k - 1` candidates sharing the most slots with it.
/// Ties go to the lower corpus index; the reference is never included.
fn hardest_subset(images: &[Vec<Slot>], reference: usize, target: usize, k: usize) -> Option<Vec<usize>> {
    let mut others: Vec<(usize, usize)> = (0..images.len())
        .filter(|&i| i != reference && i != target)
        .map(|i| (slot_overlap(&images[i], &images[target]), i))
        .collect();
    others.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut subset = vec![target];
    subset.extend(others.into_iter().take(k.saturating_sub(1)).map(|(_, i)| i));
    subset.sort_unstable();
    (subset.len() >= 2).then_some(subset)
}

/// On-disk description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n_patches: usize,
    pub d_img: usize,
    pub max_caption_len: usize,
    pub n_images: usize,
    pub n_triplets: usize,
    pub synthetic: Option<SyntheticSpec>,
}

pub const CORPUS_FILE: &str = "corpus.bin";
pub const TRIPLETS_FILE: &str = "triplets.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "dataset.json";

/// Corpus, triplets and vocabulary loaded from one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub corpus: Corpus,
    pub triplets: Vec<Triplet>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn from_task(task: &SyntheticTask) -> Self {
        Self {
            meta: DatasetMeta {
                n_patches: task.spec.n_slots,
                d_img: task.spec.d_img,
                max_caption_len: PROGRAM_LEN,
                n_images: task.corpus.len(),
                n_triplets: task.triplets.len(),
                synthetic: Some(task.spec.clone()),
            },
            corpus: task.corpus.clone(),
            triplets: task.triplets.clone(),
            vocab: task.vocab.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save(&dir.join(CORPUS_FILE))?;
        save_triplets(&dir.join(TRIPLETS_FILE), &self.triplets, &self.vocab)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        write_atomic(&dir.join(META_FILE), meta.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let corpus = Corpus::load(&dir.join(CORPUS_FILE), meta.n_patches)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let triplets = load_triplets(&dir.join(TRIPLETS_FILE), &vocab, meta.max_caption_len, Some(&corpus))?;
        Ok(Self { meta, corpus, triplets, vocab })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        SyntheticSpec::default().vocabulary()
    }

    #[test]
    fn empty_manifest_is_empty_list() {
        assert!(parse_triplets("", &vocab(), 3, None).unwrap().is_empty());
    }

    #[test]
    fn manifest_preserves_order() {
        let text = "q0\ta\tADD obj1 attr0\tb\nq1\tb\tREMOVE obj1 <pad>\ta\nq2\ta\tMODIFY obj0 attr2\tc\tc,d\n";
        let t = parse_triplets(text, &vocab(), 3, None).unwrap();
        assert_eq!(t.iter().map(|t| t.query_id.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2"]);
        assert_eq!(t[2].subset_ids.as_deref(), Some(&["c".to_string(), "d".to_string()][..]));
        assert_eq!(format_triplets(&t, &vocab()), text);
    }

    #[test]
    fn missing_target_names_line_one() {
        let err = parse_triplets("q0\ta\tADD obj1 attr0\n", &vocab(), 3, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let err = parse_triplets("q0\ta\tPAINT obj1\tb\n", &vocab(), 3, None).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { line: 1, ref token } if token == "PAINT"));
    }

    #[test]
    fn dangling_id_is_referential_error() {
        let mut corpus = Corpus::new();
        corpus.push("a", ImageFeatures::new(Mat::zeros(1, 2)).unwrap()).unwrap();
        let err = parse_triplets("q0\ta\tADD obj1 attr0\tb\n", &vocab(), 3, Some(&corpus)).unwrap_err();
        assert!(matches!(err, Error::Referential(_)));
    }

    #[test]
    fn subset_must_hold_target_and_not_reference() {
        assert!(parse_triplets("q\ta\tADD obj1 attr0\tb\ta,b\n", &vocab(), 3, None).is_err());
        assert!(parse_triplets("q\ta\tADD obj1 attr0\tb\tc,d\n", &vocab(), 3, None).is_err());
    }

    #[test]
    fn cache_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let m = Mat::from_vec(3, 4, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap();
        let ids: Vec<String> = ["x", "yy", "zzz"].iter().map(|s| s.to_string()).collect();
        write_embedding_cache(&path, &ids, &m).unwrap();
        assert_eq!(read_embedding_cache(&path).unwrap(), (ids, m));

        write_embedding_cache(&path, &[], &Mat::zeros(0, 5)).unwrap();
        let (ids, m) = read_embedding_cache(&path).unwrap();
        assert!(ids.is_empty());
        assert_eq!(m.shape(), (0, 5));
    }

    #[test]
    fn cache_rejects_bad_magic_and_truncation() {
        let bytes = encode_embedding_cache(&["a".into()], &Mat::filled(1, 2, 1.5)).unwrap();
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(decode_embedding_cache(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_embedding_cache(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn remove_empties_the_holder() {
        let reference = vec![Some((0, 0)), Some((1, 1))];
        let out = Edit::Remove { object: 1 }.apply(&reference).unwrap();
        assert_eq!(slot_key(&out), slot_key(&[Some((0, 0)), None]));
        assert!(Edit::Remove { object: 5 }.apply(&reference).is_none());
        assert!(Edit::Add { object: 0, attr: 2 }.apply(&[Some((0, 0)), None]).is_none());
        assert!(Edit::Modify { object: 0, attr: 0 }.apply(&reference).is_none());
    }

    #[test]
    fn single_slot_modify_only() {
        let spec = SyntheticSpec {
            n_slots: 1,
            corpus_size: 2,
            edit_mix: EditMix { add: 0.0, remove: 0.0, modify: 1.0 },
            seed: 7,
            ..SyntheticSpec::default()
        };
        let task = generate_synthetic(&spec).unwrap();
        assert_eq!(task.corpus.len(), 2);
        assert!(!task.triplets.is_empty());
        for t in &task.triplets {
            assert_eq!(EditKind::of_caption(&t.caption, &task.vocab), Some(EditKind::Modify));
            let r = task.decode_slots(task.corpus.get(&t.reference_id).unwrap()).unwrap();
            let g = task.decode_slots(task.corpus.get(&t.target_id).unwrap()).unwrap();
            let (Some((ro, ra)), Some((go, ga))) = (r[0], g[0]) else { panic!("empty slot") };
            assert_eq!(ro, go);
            assert_ne!(ra, ga);
        }
        assert_eq!(generate_synthetic(&spec).unwrap(), task);
    }

    #[test]
    fn config_errors() {
        let bad_mix = SyntheticSpec { edit_mix: EditMix { add: 0.5, remove: 0.2, modify: 0.2 }, ..Default::default() };
        assert!(matches!(generate_synthetic(&bad_mix), Err(Error::Config(_))));
        let too_small = SyntheticSpec { corpus_size: 1, ..Default::default() };
        assert!(matches!(generate_synthetic(&too_small), Err(Error::Config(_))));
        let too_big = SyntheticSpec { n_slots: 1, n_object_types: 1, n_attr_values: 2, corpus_size: 3, ..Default::default() };
        assert!(matches!(generate_synthetic(&too_big), Err(Error::Config(_))));
    }
}
