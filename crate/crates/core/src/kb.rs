//! Knowledge base tables, dictionary entity linking, the token×entity
//! matching matrix and corpus-driven subgraph extraction.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use kvlp_tensor::{Scalar, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub canonical_name: String,
    /// Lowercase surface forms; always contains the canonical name.
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub id: String,
    pub name: String,
}

/// Triple over entity and relation table indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: Vec<Triple>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    /// Space-joined token sequence of a surface form → entity index.
    lexicon: HashMap<String, usize>,
    max_surface_len: usize,
}

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";

fn tsv_fields<'a>(line: &'a str, n: usize, file: &str, lineno: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::Format {
            file: file.to_string(),
            line: lineno,
            msg: format!("expected {} tab-separated fields, found {}", n, f.len()),
        });
    }
    Ok(f)
}

impl KnowledgeBase {
    /// Builds and indexes a KB. Surface-form collisions keep the entity that
    /// comes first in table order.
    pub fn new(mut entities: Vec<Entity>, relations: Vec<Relation>, triples: Vec<Triple>) -> Result<Self> {
        let mut entity_index = HashMap::new();
        for (i, e) in entities.iter_mut().enumerate() {
            if entity_index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Format {
                    file: ENTITIES_FILE.into(),
                    line: i + 1,
                    msg: format!("duplicate entity id {}", e.id),
                });
            }
            let canon = e.canonical_name.to_lowercase();
            if !e.synonyms.contains(&canon) {
                e.synonyms.insert(0, canon);
            }
        }
        let mut relation_index = HashMap::new();
        for (i, r) in relations.iter().enumerate() {
            if relation_index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Format {
                    file: RELATIONS_FILE.into(),
                    line: i + 1,
                    msg: format!("duplicate relation id {}", r.id),
                });
            }
        }
        for t in &triples {
            if t.head >= entities.len() || t.tail >= entities.len() || t.relation >= relations.len() {
                return Err(Error::Integrity(format!("triple {:?} references a missing row", t)));
            }
        }
        let mut lexicon = HashMap::new();
        let mut max_surface_len = 0;
        for (i, e) in entities.iter().enumerate() {
            for s in &e.synonyms {
                let toks = tokenize(s);
                if toks.is_empty() {
                    continue;
                }
                max_surface_len = max_surface_len.max(toks.len());
                lexicon.entry(toks.join(" ")).or_insert(i);
            }
        }
        Ok(KnowledgeBase {
            entities,
            relations,
            triples,
            entity_index,
            relation_index,
            lexicon,
            max_surface_len,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).at(dir.join(name));

        let mut entities = Vec::new();
        for (n, line) in read(ENTITIES_FILE)?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f = tsv_fields(line, 3, ENTITIES_FILE, n + 1)?;
            let synonyms = f[2]
                .split('|')
                .filter(|s| !s.is_empty())
                .map(str::to_lowercase)
                .collect();
            entities.push(Entity {
                id: f[0].to_string(),
                canonical_name: f[1].to_string(),
                synonyms,
            });
        }

        let mut relations = Vec::new();
        for (n, line) in read(RELATIONS_FILE)?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f = tsv_fields(line, 2, RELATIONS_FILE, n + 1)?;
            relations.push(Relation {
                id: f[0].to_string(),
                name: f[1].to_string(),
            });
        }

        let ent_ix: HashMap<&str, usize> = entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let rel_ix: HashMap<&str, usize> = relations.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        if ent_ix.len() != entities.len() {
            let mut seen = BTreeSet::new();
            let dup = entities.iter().find(|e| !seen.insert(e.id.as_str())).map(|e| e.id.clone());
            return Err(Error::Format {
                file: ENTITIES_FILE.into(),
                line: 0,
                msg: format!("duplicate entity id {}", dup.unwrap_or_default()),
            });
        }
        let mut triples = Vec::new();
        for (n, line) in read(TRIPLES_FILE)?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f = tsv_fields(line, 3, TRIPLES_FILE, n + 1)?;
            let lookup = |ix: &HashMap<&str, usize>, id: &str, what: &str| {
                ix.get(id).copied().ok_or_else(|| {
                    Error::Integrity(format!("{}:{}: unknown {} id {}", TRIPLES_FILE, n + 1, what, id))
                })
            };
            triples.push(Triple {
                head: lookup(&ent_ix, f[0], "entity")?,
                relation: lookup(&rel_ix, f[1], "relation")?,
                tail: lookup(&ent_ix, f[2], "entity")?,
            });
        }
        Self::new(entities, relations, triples)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut ents = String::new();
        for e in &self.entities {
            ents.push_str(&format!("{}\t{}\t{}\n", e.id, e.canonical_name, e.synonyms.join("|")));
        }
        let mut rels = String::new();
        for r in &self.relations {
            rels.push_str(&format!("{}\t{}\n", r.id, r.name));
        }
        let mut trips = String::new();
        for t in &self.triples {
            trips.push_str(&format!(
                "{}\t{}\t{}\n",
                self.entities[t.head].id, self.relations[t.relation].id, self.entities[t.tail].id
            ));
        }
        for (name, body) in [(ENTITIES_FILE, ents), (RELATIONS_FILE, rels), (TRIPLES_FILE, trips)] {
            std::fs::write(dir.join(name), body).at(dir.join(name))?;
        }
        Ok(())
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn relation_index(&self, id: &str) -> Option<usize> {
        self.relation_index.get(id).copied()
    }

    /// Entity linked to an exact token sequence, if any.
    pub fn lookup_surface(&self, tokens: &[String]) -> Option<usize> {
        self.lexicon.get(&tokens.join(" ")).copied()
    }

    pub fn max_surface_len(&self) -> usize {
        self.max_surface_len
    }

    /// Sub-KB holding only the given entities (table order kept) and the
    /// triples among them. Relations are kept whole.
    pub fn restrict(&self, keep: &BTreeSet<usize>) -> Result<Self> {
        let remap: HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let entities = keep.iter().map(|&i| self.entities[i].clone()).collect();
        let triples = extract_subgraph(self, keep)
            .into_iter()
            .map(|t| Triple {
                head: remap[&t.head],
                relation: t.relation,
                tail: remap[&t.tail],
            })
            .collect();
        Self::new(entities, self.relations.clone(), triples)
    }
}

/// One linked mention: entity index and token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// A token sequence with its ordered entity mentions.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LinkedText {
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl LinkedText {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn entity_ids(&self) -> Vec<usize> {
        self.mentions.iter().map(|m| m.entity).collect()
    }

    pub fn match_matrix(&self) -> MatchMatrix {
        build_matching_matrix(self)
    }
}

/// Greedy left-to-right longest match against the KB lexicon. Matched tokens
/// are consumed, so mentions never overlap.
pub fn link_entities(tokens: &[String], kb: &KnowledgeBase) -> LinkedText {
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = kb.max_surface_len.min(tokens.len() - i);
        let hit = (1..=longest)
            .rev()
            .find_map(|len| kb.lookup_surface(&tokens[i..i + len]).map(|e| (len, e)));
        match hit {
            Some((len, entity)) => {
                mentions.push(Mention {
                    entity,
                    start: i,
                    end: i + len,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    LinkedText {
        tokens: tokens.to_vec(),
        mentions,
    }
}

/// Binary token×entity incidence matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl MatchMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatchMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_sum(&self, i: usize) -> usize {
        (0..self.cols).map(|j| self.get(i, j) as usize).sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        (0..self.rows).map(|i| self.get(i, j) as usize).sum()
    }

    pub fn total(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Dense matrix with an all-zero row added before and after the content
    /// rows, matching a text stream framed by start and boundary tokens.
    /// With `row_normalize`, each nonzero row is divided by its sum.
    pub fn to_padded_tensor<T: Scalar>(&self, row_normalize: bool) -> Tensor<T> {
        let mut t = Tensor::zeros([self.rows + 2, self.cols]);
        for i in 0..self.rows {
            let s = self.row_sum(i);
            for j in 0..self.cols {
                if self.get(i, j) == 1 {
                    let v = if row_normalize { 1.0 / s as f64 } else { 1.0 };
                    t.row_mut(i + 1)[j] = T::lit(v);
                }
            }
        }
        t
    }
}

/// `P[i][j] = 1` iff token `i` lies in the span of mention `j`.
pub fn build_matching_matrix(linked: &LinkedText) -> MatchMatrix {
    let mut p = MatchMatrix::zeros(linked.tokens.len(), linked.mentions.len());
    for (j, m) in linked.mentions.iter().enumerate() {
        for i in m.start..m.end {
            p.set(i, j, 1);
        }
    }
    p
}

/// Triples whose head and tail both lie in `entity_set`.
pub fn extract_subgraph(kb: &KnowledgeBase, entity_set: &BTreeSet<usize>) -> Vec<Triple> {
    kb.triples
        .iter()
        .filter(|t| entity_set.contains(&t.head) && entity_set.contains(&t.tail))
        .copied()
        .collect()
}

/// Union of all linked entities in a corpus.
pub fn corpus_entity_set<'a>(corpus: impl IntoIterator<Item = &'a LinkedText>) -> BTreeSet<usize> {
    corpus.into_iter().flat_map(|l| l.mentions.iter().map(|m| m.entity)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str, name: &str, syn: &[&str]) -> Entity {
        Entity {
            id: id.into(),
            canonical_name: name.into(),
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn fixture() -> KnowledgeBase {
        KnowledgeBase::new(
            vec![
                ent("C1", "brain", &["brain"]),
                ent("C2", "brain magnetic resonance imaging", &["brain mri"]),
                ent("C3", "lesion", &["lesion", "lesions"]),
            ],
            vec![Relation {
                id: "R1".into(),
                name: "finding_site".into(),
            }],
            vec![
                Triple {
                    head: 2,
                    relation: 0,
                    tail: 0,
                },
                Triple {
                    head: 1,
                    relation: 0,
                    tail: 0,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn fixture_counts() {
        let kb = fixture();
        assert_eq!(kb.num_entities(), 3);
        assert_eq!(kb.num_triples(), 2);
        assert!(kb.entities()[1].synonyms.contains(&"brain magnetic resonance imaging".to_string()));
    }

    #[test]
    fn longest_match_wins() {
        let kb = fixture();
        let l = link_entities(&toks("brain magnetic resonance imaging shows lesion"), &kb);
        assert_eq!(
            l.mentions,
            vec![
                Mention {
                    entity: 1,
                    start: 0,
                    end: 4
                },
                Mention {
                    entity: 2,
                    start: 5,
                    end: 6
                }
            ]
        );
    }

    #[test]
    fn empty_text_links_nothing() {
        let l = link_entities(&[], &fixture());
        assert!(l.mentions.is_empty());
        let p = l.match_matrix();
        assert_eq!((p.rows(), p.cols()), (0, 0));
    }

    #[test]
    fn matching_matrix_column() {
        let l = LinkedText {
            tokens: toks("a b c d"),
            mentions: vec![Mention {
                entity: 0,
                start: 1,
                end: 3,
            }],
        };
        let p = build_matching_matrix(&l);
        assert_eq!((0..4).map(|i| p.get(i, 0)).collect::<Vec<_>>(), vec![0, 1, 1, 0]);
        let padded: Tensor<f64> = p.to_padded_tensor(false);
        assert_eq!(padded.shape(), &[6, 1]);
        assert_eq!(padded.data(), &[0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn no_entities_gives_zero_width_matrix() {
        let l = LinkedText {
            tokens: toks("a b c"),
            mentions: vec![],
        };
        let p = build_matching_matrix(&l);
        assert_eq!((p.rows(), p.cols(), p.total()), (3, 0, 0));
    }

    #[test]
    fn duplicate_entity_id_is_format_error() {
        let r = KnowledgeBase::new(vec![ent("X", "a", &[]), ent("X", "b", &[])], vec![], vec![]);
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn surface_collision_keeps_first_entity() {
        let kb = KnowledgeBase::new(vec![ent("A", "cold", &["cold"]), ent("B", "chill", &["cold"])], vec![], vec![])
            .unwrap();
        assert_eq!(kb.lookup_surface(&toks("cold")), Some(0));
    }

    #[test]
    fn subgraph_edges() {
        let kb = fixture();
        let all: BTreeSet<usize> = (0..3).collect();
        assert_eq!(extract_subgraph(&kb, &all).len(), 2);
        assert!(extract_subgraph(&kb, &BTreeSet::new()).is_empty());
        let sub = kb.restrict(&[0, 2].into_iter().collect()).unwrap();
        assert_eq!(sub.num_entities(), 2);
        assert_eq!(
            sub.triples(),
            &[Triple {
                head: 1,
                relation: 0,
                tail: 0
            }]
        );
    }

    #[test]
    fn entity_set_union() {
        let kb = fixture();
        let a = link_entities(&toks("brain and lesion"), &kb);
        assert_eq!(corpus_entity_set([&a]), [0, 2].into_iter().collect());
        let b = link_entities(&toks("brain mri"), &kb);
        let c = link_entities(&toks("lesions"), &kb);
        assert_eq!(corpus_entity_set([&b, &c]).len(), 2);
    }
}
