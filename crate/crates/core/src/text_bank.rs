//! Prompt construction, text-embedding banks and category splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

pub const BANK_HEADER: &str = "bank.json";
pub const BANK_DATA: &str = "bank.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rarity {
    Rare,
    NonRare,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Rarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Rarity::Rare => "rare",
            Rarity::NonRare => "non_rare",
            Rarity::NotApplicable => "n/a",
        }
    }
}

/// One interaction category: an (action, object) pair with split labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub action: String,
    pub object: String,
    pub seen: bool,
    pub rarity: Rarity,
}

// ---- prompts ----

fn parse_table(src: &str) -> HashMap<String, String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.split_once('\t')?;
            Some((k.trim().to_lowercase(), v.trim().to_string()))
        })
        .collect()
}

fn gerund_overrides() -> &'static HashMap<String, String> {
    static TABLE: OnceLock<HashMap<String, String>> = OnceLock::new();
    TABLE.get_or_init(|| parse_table(include_str!("../assets/gerund_overrides.tsv")))
}

fn article_overrides() -> &'static HashMap<String, String> {
    static TABLE: OnceLock<HashMap<String, String>> = OnceLock::new();
    TABLE.get_or_init(|| parse_table(include_str!("../assets/article_overrides.tsv")))
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn vowel_groups(word: &str) -> usize {
    let mut groups = 0;
    let mut prev = false;
    for c in word.chars() {
        let v = is_vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    groups
}

/// Present participle of a single verb.
pub fn gerund(verb: &str) -> String {
    let verb = verb.to_lowercase();
    if let Some(g) = gerund_overrides().get(&verb) {
        return g.clone();
    }
    let chars: Vec<char> = verb.chars().collect();
    let n = chars.len();
    if verb.ends_with("ie") {
        return format!("{}ying", &verb[..verb.len() - 2]);
    }
    if verb.ends_with("ee") || verb.ends_with("oe") || verb.ends_with("ye") {
        return format!("{verb}ing");
    }
    if n > 2 && verb.ends_with('e') {
        return format!("{}ing", &verb[..verb.len() - 1]);
    }
    if n >= 3 {
        let (a, b, c) = (chars[n - 3], chars[n - 2], chars[n - 1]);
        let cvc = !is_vowel(a) && is_vowel(b) && !is_vowel(c) && !matches!(c, 'w' | 'x' | 'y');
        if cvc && vowel_groups(&verb) == 1 {
            return format!("{verb}{c}ing");
        }
    }
    format!("{verb}ing")
}

/// `a` or `an` for the phrase starting with `noun`.
pub fn article(noun: &str) -> &'static str {
    let first = noun
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .to_lowercase();
    match article_overrides().get(&first).map(String::as_str) {
        Some("an") => "an",
        Some(_) => "a",
        None if first.starts_with(is_vowel) => "an",
        None => "a",
    }
}

fn words(s: &str) -> String {
    s.split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `"a photo of a person <action+ing> a/an <object>"`; multi-word actions
/// inflect their first word only.
pub fn build_prompt(action: &str, object: &str) -> Result<String> {
    let (action, object) = (words(action), words(object));
    if action.is_empty() || object.is_empty() {
        return Err(Error::InvalidInput(
            "prompt needs a non-empty action and object".into(),
        ));
    }
    let (verb, rest) = match action.split_once(' ') {
        Some((v, r)) => (v, format!(" {r}")),
        None => (action.as_str(), String::new()),
    };
    let object = object.to_lowercase();
    Ok(format!(
        "a photo of a person {}{rest} {} {object}",
        gerund(verb),
        article(&object)
    ))
}

/// Deterministic stand-in for a text encoder: a unit vector whose two
/// halves are drawn independently and each carry half the energy.
pub fn stub_encode(prompt: &str, seed: u64, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Bank(format!("embedding dim {dim} must be even and positive")));
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for _ in 0..2 {
        let v: Vec<f64> = (0..half).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2 / norm;
        out.extend(v.iter().map(|x| (x * s) as f32));
    }
    Ok(out)
}

// ---- bank ----

#[derive(Serialize, Deserialize)]
struct BankHeader {
    entries: Vec<CategoryEntry>,
    dim: usize,
    provenance: String,
    data_file: String,
}

/// Per-category text embeddings with split membership.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingBank {
    entries: Vec<CategoryEntry>,
    embeddings: Mat<f32>,
    provenance: String,
}

impl TextEmbeddingBank {
    pub fn new(entries: Vec<CategoryEntry>, embeddings: Mat<f32>, provenance: impl Into<String>) -> Result<Self> {
        if entries.len() != embeddings.rows() {
            return Err(Error::Bank(format!(
                "{} entries but {} embeddings",
                entries.len(),
                embeddings.rows()
            )));
        }
        let mut ids = HashSet::new();
        let mut pairs = HashSet::new();
        for e in &entries {
            if !ids.insert(e.id) {
                return Err(Error::Bank(format!("duplicate category id {}", e.id)));
            }
            if !pairs.insert((e.action.as_str(), e.object.as_str())) {
                return Err(Error::Bank(format!(
                    "duplicate category ({}, {})",
                    e.action, e.object
                )));
            }
        }
        Ok(Self {
            entries,
            embeddings,
            provenance: provenance.into(),
        })
    }

    /// Encodes every entry's prompt with [`stub_encode`].
    pub fn from_stub(entries: Vec<CategoryEntry>, seed: u64, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(entries.len() * dim);
        for e in &entries {
            data.extend(stub_encode(&build_prompt(&e.action, &e.object)?, seed, dim)?);
        }
        let rows = entries.len();
        Self::new(
            entries,
            Mat::from_vec(rows, dim, data)?,
            format!("stub seed={seed}"),
        )
    }

    pub fn entries(&self) -> &[CategoryEntry] {
        &self.entries
    }

    pub fn embeddings(&self) -> &Mat<f32> {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn entry(&self, id: usize) -> Option<&CategoryEntry> {
        self.position(id).map(|i| &self.entries[i])
    }

    pub fn find(&self, action: &str, object: &str) -> Option<&CategoryEntry> {
        self.entries
            .iter()
            .find(|e| e.action == action && e.object == object)
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Bank(format!(
                "bank dim {} does not match configured 2D = {expected}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Embedding rows for `ids`, in the given order.
    pub fn subset<T: Real>(&self, ids: &[usize]) -> Result<Mat<T>> {
        if ids.is_empty() {
            return Err(Error::Bank("empty category set".into()));
        }
        let mut out = Mat::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            let i = self
                .position(id)
                .ok_or_else(|| Error::Bank(format!("unknown category id {id}")))?;
            for (o, &v) in out.row_mut(r).iter_mut().zip(self.embeddings.row(i)) {
                *o = T::cst(f64::from(v));
            }
        }
        Ok(out)
    }

    /// Flags exactly `ids` as unseen and every other category as seen.
    pub fn with_unseen(mut self, ids: &[usize]) -> Result<Self> {
        let held: HashSet<usize> = ids.iter().copied().collect();
        for id in &held {
            if self.position(*id).is_none() {
                return Err(Error::Bank(format!("unknown category id {id}")));
            }
        }
        for e in &mut self.entries {
            e.seen = !held.contains(&e.id);
        }
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = BankHeader {
            entries: self.entries.clone(),
            dim: self.dim(),
            provenance: self.provenance.clone(),
            data_file: BANK_DATA.into(),
        };
        let path = dir.join(BANK_HEADER);
        fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(BANK_DATA);
        fs::write(&path, f32::to_le_bytes_vec(self.embeddings.data())).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_HEADER);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let header: BankHeader = serde_json::from_slice(&text)?;
        let path = dir.join(&header.data_file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n = header.entries.len();
        if bytes.len() != n * header.dim * 4 {
            return Err(Error::Bank(format!(
                "{} holds {} bytes, expected {} for {n} × {}",
                path.display(),
                bytes.len(),
                n * header.dim * 4,
                header.dim
            )));
        }
        let data = f32::from_le_bytes_slice(&bytes);
        Self::new(header.entries, Mat::from_vec(n, header.dim, data)?, header.provenance)
    }

    /// Loads and checks the width against the configured text-space dim.
    pub fn load_expecting(dir: &Path, dim: usize) -> Result<Self> {
        let bank = Self::load(dir)?;
        bank.check_dim(dim)?;
        Ok(bank)
    }
}

#[derive(Deserialize)]
struct CsvRow {
    id: usize,
    action: String,
    object: String,
    seen: String,
    rarity: String,
}

/// Reads `id,action,object,seen,rarity` rows.
pub fn read_categories_csv(path: &Path) -> Result<Vec<CategoryEntry>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = |what: &str, v: &str| {
            Error::Data(format!(
                "{} row {}: unrecognized {what} `{v}`",
                path.display(),
                line + 2
            ))
        };
        let seen = match row.seen.trim().to_lowercase().as_str() {
            "seen" | "true" | "1" | "yes" => true,
            "unseen" | "false" | "0" | "no" => false,
            v => return Err(bad("seen flag", v)),
        };
        let rarity = match row.rarity.trim().to_lowercase().as_str() {
            "rare" => Rarity::Rare,
            "non_rare" | "non-rare" | "nonrare" => Rarity::NonRare,
            "n/a" | "na" | "" => Rarity::NotApplicable,
            v => return Err(bad("rarity", v)),
        };
        out.push(CategoryEntry {
            id: row.id,
            action: row.action.trim().to_string(),
            object: row.object.trim().to_string(),
            seen,
            rarity,
        });
    }
    Ok(out)
}

// ---- splits ----

/// mAP per split; `None` where the split holds no category with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub full: Option<f64>,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

/// Averages per-category AP within each split. `None` values (no ground
/// truth) are excluded from every mean.
pub fn split_report(
    bank: &TextEmbeddingBank,
    ap_by_category: &BTreeMap<usize, Option<f64>>,
) -> Result<SplitReport> {
    let mut groups: [Vec<f64>; 5] = Default::default();
    for (&id, ap) in ap_by_category {
        let e = bank
            .entry(id)
            .ok_or_else(|| Error::Bank(format!("category {id} has no split labels in the bank")))?;
        let Some(ap) = *ap else { continue };
        groups[0].push(ap);
        groups[if e.seen { 1 } else { 2 }].push(ap);
        match e.rarity {
            Rarity::Rare => groups[3].push(ap),
            Rarity::NonRare => groups[4].push(ap),
            Rarity::NotApplicable => {}
        }
    }
    let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SplitReport {
        full: mean(&groups[0]),
        seen: mean(&groups[1]),
        unseen: mean(&groups[2]),
        rare: mean(&groups[3]),
        non_rare: mean(&groups[4]),
    })
}
