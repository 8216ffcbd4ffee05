//! Synthetic knowledge base and image-text pairs whose cross-modal structure
//! is carried entirely by entities.
//!
//! Each entity owns a glyph: a binary block pattern of one patch size, drawn
//! at a fixed grid cell with a fixed intensity. A pair's image superposes the
//! glyphs of its entities; its text names them inside filler words.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_pgm, CorpusRecord, Split, CORPUS_FILE, IMAGE_DIR};
use crate::error::{Error, IoContext, Result};
use crate::kb::{Entity, KnowledgeBase, Relation, Triple};
use crate::rng::substream;

pub const MANIFEST_FILE: &str = "manifest.json";

const TEMPLATE_HEAD: [&str; 3] = ["the", "image", "shows"];
const JOINER: &str = "and";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Probability that each ordered `(head, relation, tail)` candidate is kept.
    pub triple_density: f64,
    pub n_pairs: usize,
    pub entities_per_pair: usize,
    pub image_size: usize,
    /// Glyph block size; should equal the encoder patch size.
    pub patch_size: usize,
    pub n_fillers: usize,
    pub fillers_min: usize,
    pub fillers_max: usize,
    /// Tokens per surface form, at most.
    pub max_name_tokens: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_entities: 24,
            n_relations: 4,
            triple_density: 0.05,
            n_pairs: 500,
            entities_per_pair: 2,
            image_size: 32,
            patch_size: 8,
            n_fillers: 50,
            fillers_min: 10,
            fillers_max: 16,
            max_name_tokens: 2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(0.0..=1.0).contains(&self.triple_density) {
            return bad(format!("triple density {} outside [0, 1]", self.triple_density));
        }
        if self.entities_per_pair == 0 || self.entities_per_pair > self.n_entities {
            return bad(format!(
                "entities_per_pair {} with {} entities",
                self.entities_per_pair, self.n_entities
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.fillers_min > self.fillers_max || self.max_name_tokens == 0 {
            return bad("empty filler or name length range".into());
        }
        if self.n_fillers == 0 && self.fillers_max > 0 {
            return bad("filler words requested from an empty filler vocabulary".into());
        }
        Ok(())
    }
}

/// Pseudo-words built from consonant-vowel syllables.
fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..=3);
    let mut w = String::with_capacity(6);
    for _ in 0..syllables {
        w.push(C[rng.gen_range(0..C.len())] as char);
        w.push(V[rng.gen_range(0..V.len())] as char);
    }
    w
}

/// `n` distinct words not in `taken`; the new words are added to `taken`.
fn fresh_words<R: Rng>(n: usize, taken: &mut BTreeSet<String>, rng: &mut R) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn reserved() -> BTreeSet<String> {
    TEMPLATE_HEAD.iter().chain([&JOINER]).map(|s| s.to_string()).collect()
}

/// Entities with 1–3 surface forms each (every word used by one entity only)
/// and triples sampled at the configured density without self-loops.
pub fn generate_kb(cfg: &GeneratorConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "kb", 0);
    let mut taken = reserved();
    let mut entities = Vec::with_capacity(cfg.n_entities);
    for i in 0..cfg.n_entities {
        let n_forms = rng.gen_range(1..=3);
        let forms: Vec<String> = (0..n_forms)
            .map(|_| {
                let len = rng.gen_range(1..=cfg.max_name_tokens);
                fresh_words(len, &mut taken, &mut rng).join(" ")
            })
            .collect();
        entities.push(Entity {
            id: format!("E{i:04}"),
            canonical_name: forms[0].clone(),
            synonyms: forms,
        });
    }
    let relations = (0..cfg.n_relations)
        .map(|r| Relation {
            id: format!("R{r:02}"),
            name: format!("relation_{r}"),
        })
        .collect();
    let mut triples = Vec::new();
    for head in 0..cfg.n_entities {
        for relation in 0..cfg.n_relations {
            for tail in 0..cfg.n_entities {
                if head != tail && rng.gen_bool(cfg.triple_density) {
                    triples.push(Triple { head, relation, tail });
                }
            }
        }
    }
    KnowledgeBase::new(entities, relations, triples)
}

/// Filler words, disjoint from every entity word and the template.
pub fn filler_words(kb: &KnowledgeBase, cfg: &GeneratorConfig) -> Vec<String> {
    let mut taken = reserved();
    for e in kb.entities() {
        for s in &e.synonyms {
            taken.extend(s.split(' ').map(String::from));
        }
    }
    let mut rng = substream(cfg.seed, "fillers", 0);
    fresh_words(cfg.n_fillers, &mut taken, &mut rng)
}

/// Glyph of one entity: grid cell, `patch×patch` on/off pattern and
/// intensity (a multiple of 1/255 so it survives 8-bit storage).
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub cell: usize,
    pub pattern: Vec<bool>,
    pub intensity: f32,
}

pub fn glyph(entity: usize, cfg: &GeneratorConfig) -> Glyph {
    let mut rng = substream(cfg.seed, "glyph", entity as u64);
    let cells = (cfg.image_size / cfg.patch_size).pow(2);
    let cell = rng.gen_range(0..cells);
    let n = cfg.patch_size * cfg.patch_size;
    let mut pattern: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    if !pattern.iter().any(|&b| b) {
        pattern[0] = true;
    }
    let intensity = rng.gen_range(100..=255) as f32 / 255.0;
    Glyph {
        cell,
        pattern,
        intensity,
    }
}

/// Sum of the glyphs of `entities`, clamped to 1. Row-major, one channel.
pub fn render_image(entities: &[usize], cfg: &GeneratorConfig) -> Vec<f32> {
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let grid = s / p;
    let mut img = vec![0.0f32; s * s];
    for &e in entities {
        let g = glyph(e, cfg);
        let (cy, cx) = (g.cell / grid, g.cell % grid);
        for y in 0..p {
            for x in 0..p {
                if g.pattern[y * p + x] {
                    let px = &mut img[(cy * p + y) * s + cx * p + x];
                    *px = (*px + g.intensity).min(1.0);
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub id: String,
    pub pixels: Vec<f32>,
    pub text: String,
    /// Entity table indices named in the text, in text order.
    pub gold: Vec<usize>,
    pub split: Split,
}

/// One pair for the given entities. The image depends only on the entity
/// set; the surface forms and fillers are drawn from `rng`.
pub fn generate_pair<R: Rng>(
    kb: &KnowledgeBase,
    entities: &[usize],
    fillers: &[String],
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<SyntheticPair> {
    if entities.is_empty() {
        return Err(Error::Argument("a pair needs at least one entity".into()));
    }
    if let Some(&bad) = entities.iter().find(|&&e| e >= kb.num_entities()) {
        return Err(Error::Argument(format!("unknown entity index {bad}")));
    }
    let mut words: Vec<String> = TEMPLATE_HEAD.iter().map(|s| s.to_string()).collect();
    for (k, &e) in entities.iter().enumerate() {
        if k > 0 {
            words.push(JOINER.to_string());
        }
        let forms = &kb.entities()[e].synonyms;
        words.push(forms.choose(rng).expect("entities have a surface form").clone());
    }
    let n_fill = rng.gen_range(cfg.fillers_min..=cfg.fillers_max);
    for _ in 0..n_fill {
        words.push(fillers.choose(rng).expect("nonempty filler vocabulary").clone());
    }
    Ok(SyntheticPair {
        id: String::new(),
        pixels: render_image(entities, cfg),
        text: words.join(" "),
        gold: entities.to_vec(),
        split: Split::Train,
    })
}

/// First 80% train, next 10% validation, rest test.
pub fn split_of(index: usize, n: usize) -> Split {
    let train = (0.8 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn generate_pairs(kb: &KnowledgeBase, cfg: &GeneratorConfig) -> Result<Vec<SyntheticPair>> {
    cfg.validate()?;
    let fillers = filler_words(kb, cfg);
    (0..cfg.n_pairs)
        .map(|i| {
            let mut rng = substream(cfg.seed, "pair", i as u64);
            let subset = index::sample(&mut rng, kb.num_entities(), cfg.entities_per_pair).into_vec();
            let mut pair = generate_pair(kb, &subset, &fillers, cfg, &mut rng)?;
            pair.id = format!("p{i:05}");
            pair.split = split_of(i, cfg.n_pairs);
            Ok(pair)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator: GeneratorConfig,
    pub pairs: usize,
    pub splits: BTreeMap<String, usize>,
    /// Pair id → gold entity ids.
    pub gold: BTreeMap<String, Vec<String>>,
}

/// Writes the KB tables, `corpus.jsonl`, PGM images and a manifest.
pub fn generate_corpus(cfg: &GeneratorConfig, out: &Path) -> Result<CorpusManifest> {
    let kb = generate_kb(cfg)?;
    let pairs = generate_pairs(&kb, cfg)?;
    kb.save(out)?;
    let img_dir = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).at(&img_dir)?;
    let mut jsonl = String::new();
    let mut splits = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for p in &pairs {
        let rel = format!("{IMAGE_DIR}/{}.pgm", p.id);
        write_pgm(&out.join(&rel), cfg.image_size, cfg.image_size, &p.pixels)?;
        let rec = CorpusRecord {
            id: p.id.clone(),
            image: rel,
            text: p.text.clone(),
            split: p.split,
        };
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
        *splits.entry(p.split.as_str().to_string()).or_insert(0) += 1;
        gold.insert(p.id.clone(), p.gold.iter().map(|&e| kb.entities()[e].id.clone()).collect());
    }
    std::fs::write(out.join(CORPUS_FILE), jsonl).at(out.join(CORPUS_FILE))?;
    let manifest = CorpusManifest {
        generator: cfg.clone(),
        pairs: pairs.len(),
        splits,
        gold,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}
