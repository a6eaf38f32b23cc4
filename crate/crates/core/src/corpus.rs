//! Interaction logs, knowledge graphs, relation partitioning and dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Smallest sequence length compatible with leave-one-out splitting.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Merged multi-domain knowledge graph.
///
/// `sources[i]` lists the domains whose KG file contained `triples[i]`; the
/// relation partition and `domain_tags` are derived from it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeGraph {
    pub entities: BTreeSet<String>,
    pub relations: BTreeSet<String>,
    pub triples: Vec<Triple>,
    pub domain_tags: BTreeMap<String, BTreeSet<String>>,
    sources: Vec<BTreeSet<String>>,
}

impl KnowledgeGraph {
    /// Builds a graph from per-domain triple lists, dropping exact duplicates.
    pub fn from_domains<I, D>(domains: I) -> Result<Self>
    where
        I: IntoIterator<Item = (D, Vec<Triple>)>,
        D: Into<String>,
    {
        let mut index: BTreeMap<Triple, usize> = BTreeMap::new();
        let mut triples = Vec::new();
        let mut sources: Vec<BTreeSet<String>> = Vec::new();
        for (domain, list) in domains {
            let domain = domain.into();
            for t in list {
                if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
                    return Err(Error::Argument(format!("triple with empty field in domain {domain}: {t:?}")));
                }
                match index.get(&t) {
                    Some(&i) => {
                        sources[i].insert(domain.clone());
                    }
                    None => {
                        index.insert(t.clone(), triples.len());
                        triples.push(t);
                        sources.push(BTreeSet::from([domain.clone()]));
                    }
                }
            }
        }
        Ok(Self::assemble(triples, sources))
    }

    fn assemble(triples: Vec<Triple>, sources: Vec<BTreeSet<String>>) -> Self {
        let mut entities = BTreeSet::new();
        let mut relations = BTreeSet::new();
        let mut domain_tags: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (t, src) in triples.iter().zip(&sources) {
            entities.insert(t.head.clone());
            entities.insert(t.tail.clone());
            relations.insert(t.relation.clone());
            domain_tags
                .entry(t.relation.clone())
                .or_default()
                .extend(src.iter().cloned());
        }
        Self {
            entities,
            relations,
            triples,
            domain_tags,
            sources,
        }
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Domains in which at least one triple was observed.
    pub fn domains(&self) -> BTreeSet<String> {
        self.sources.iter().flatten().cloned().collect()
    }

    /// Relation vocabulary of a single domain.
    pub fn relations_of(&self, domain: &str) -> BTreeSet<String> {
        self.domain_tags
            .iter()
            .filter(|(_, ds)| ds.contains(domain))
            .map(|(r, _)| r.clone())
            .collect()
    }
}

/// Shared/specific split of the relation vocabulary. Both lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RelationPartition {
    pub shared: Vec<String>,
    pub specific: Vec<String>,
}

impl RelationPartition {
    /// Shared relations occur in at least two domains; all others are specific.
    pub fn from_graph(kg: &KnowledgeGraph) -> Self {
        let mut shared = Vec::new();
        let mut specific = Vec::new();
        for (relation, domains) in &kg.domain_tags {
            if domains.len() >= 2 {
                shared.push(relation.clone());
            } else {
                specific.push(relation.clone());
            }
        }
        Self { shared, specific }
    }

    /// Specific relations that belong to `domain`.
    pub fn specific_in(&self, kg: &KnowledgeGraph, domain: &str) -> Vec<String> {
        self.specific
            .iter()
            .filter(|r| kg.domain_tags.get(*r).is_some_and(|ds| ds.contains(domain)))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<String>,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub domain: String,
    /// Each sequence holds everything except the last two interactions.
    pub train_sequences: Vec<UserSequence>,
    pub valid_targets: BTreeMap<String, String>,
    pub test_targets: BTreeMap<String, String>,
    pub item_vocab: Vec<String>,
    pub item_entity_links: BTreeMap<String, String>,
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.train_sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.train_sequences.iter().map(|s| s.items.len() + 2).sum()
    }

    /// Restores the original full sequence of a user.
    pub fn reconstruct(&self, user: &str) -> Option<Vec<String>> {
        let seq = self.train_sequences.iter().find(|s| s.user == user)?;
        let mut items = seq.items.clone();
        items.push(self.valid_targets.get(user)?.clone());
        items.push(self.test_targets.get(user)?.clone());
        Some(items)
    }

    /// Attaches item→entity links, keeping only items of this split.
    pub fn with_links(mut self, links: BTreeMap<String, String>) -> Self {
        let vocab: HashSet<&String> = self.item_vocab.iter().collect();
        self.item_entity_links = links.into_iter().filter(|(i, _)| vocab.contains(i)).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub min_len: usize,
    /// Keep only rows whose optional fourth column is strictly greater.
    pub min_rating: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            min_len: MIN_SEQUENCE_LEN,
            min_rating: None,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<String>)> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').map(str::to_owned).collect()))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `user<TAB>item<TAB>timestamp[<TAB>rating]` rows into per-user
/// sequences ordered by timestamp, ties kept in file order.
pub fn load_interactions(path: &Path, domain: &str, opts: &LoadOptions) -> Result<Vec<UserSequence>> {
    let text = read_text(path)?;
    let mut per_user: BTreeMap<String, Vec<(i64, usize, String)>> = BTreeMap::new();
    for (order, (line, cols)) in tsv_rows(&text).enumerate() {
        if cols.len() != 3 && cols.len() != 4 {
            return Err(parse_error(path, line, format!("expected 3 or 4 tab-separated fields, got {}", cols.len())));
        }
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(parse_error(path, line, "empty user or item id"));
        }
        let ts: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("timestamp `{}` is not an integer", cols[2])))?;
        if let (Some(threshold), Some(raw)) = (opts.min_rating, cols.get(3)) {
            let rating: f64 = raw
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("rating `{raw}` is not a number")))?;
            if rating <= threshold {
                continue;
            }
        }
        per_user
            .entry(cols[0].clone())
            .or_default()
            .push((ts, order, cols[1].clone()));
    }
    let sequences: Vec<UserSequence> = per_user
        .into_iter()
        .filter(|(_, rows)| rows.len() >= opts.min_len)
        .map(|(user, mut rows)| {
            rows.sort_by_key(|&(ts, order, _)| (ts, order));
            UserSequence {
                user,
                items: rows.into_iter().map(|(_, _, item)| item).collect(),
                domain: domain.to_owned(),
            }
        })
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(sequences)
}

pub fn load_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = read_text(path)?;
    tsv_rows(&text)
        .map(|(line, cols)| match cols.as_slice() {
            [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => Ok(Triple::new(h, r, t)),
            _ => Err(parse_error(path, line, "expected `head<TAB>relation<TAB>tail`")),
        })
        .collect()
}

/// Loads one KG file per domain, merges them, and partitions the relations.
pub fn load_kg_and_partition(kg_paths: &BTreeMap<String, PathBuf>) -> Result<(KnowledgeGraph, RelationPartition)> {
    if kg_paths.len() < 2 {
        return Err(Error::Argument(format!(
            "relation partitioning needs at least two domains, got {}",
            kg_paths.len()
        )));
    }
    let mut domains = Vec::with_capacity(kg_paths.len());
    for (domain, path) in kg_paths {
        domains.push((domain.clone(), load_triples(path)?));
    }
    let kg = KnowledgeGraph::from_domains(domains)?;
    let partition = RelationPartition::from_graph(&kg);
    if partition.shared.is_empty() {
        warn!("no relation is shared between domains {:?}", kg_paths.keys().collect::<Vec<_>>());
    }
    Ok((kg, partition))
}

/// Reads `item<TAB>entity` rows.
pub fn load_item_links(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    tsv_rows(&text)
        .map(|(line, cols)| match cols.as_slice() {
            [item, entity] if !item.is_empty() && !entity.is_empty() => Ok((item.clone(), entity.clone())),
            _ => Err(parse_error(path, line, "expected `item<TAB>entity`")),
        })
        .collect()
}

/// Holds out the last item for test and the second-to-last for validation.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> Result<DatasetSplit> {
    let short: Vec<String> = sequences
        .iter()
        .filter(|s| s.items.len() < MIN_SEQUENCE_LEN)
        .map(|s| s.user.clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::SequenceTooShort(short));
    }
    let domain = sequences.first().map(|s| s.domain.clone()).unwrap_or_default();
    let mut split = DatasetSplit {
        domain,
        ..Default::default()
    };
    let mut vocab = BTreeSet::new();
    for seq in sequences {
        let n = seq.items.len();
        vocab.extend(seq.items.iter().cloned());
        split.valid_targets.insert(seq.user.clone(), seq.items[n - 2].clone());
        split.test_targets.insert(seq.user.clone(), seq.items[n - 1].clone());
        split.train_sequences.push(UserSequence {
            user: seq.user.clone(),
            items: seq.items[..n - 2].to_vec(),
            domain: seq.domain.clone(),
        });
    }
    split.item_vocab = vocab.into_iter().collect();
    Ok(split)
}

/// Replaces user ids with fresh opaque ids that never repeat across domains.
pub fn shuffle_user_identities(
    splits: &BTreeMap<String, DatasetSplit>,
    seed: u64,
) -> Result<BTreeMap<String, DatasetSplit>> {
    if splits.len() < 2 {
        return Err(Error::Argument("identity shuffling needs at least two domains".into()));
    }
    let mut slots: Vec<(String, String)> = splits
        .iter()
        .flat_map(|(d, s)| s.train_sequences.iter().map(move |seq| (d.clone(), seq.user.clone())))
        .collect();
    slots.shuffle(&mut rng::stream(seed, Purpose::UserShuffle));
    let fresh: BTreeMap<(String, String), String> = slots
        .into_iter()
        .enumerate()
        .map(|(i, key)| (key, format!("x{i}")))
        .collect();

    let mut out = BTreeMap::new();
    for (domain, split) in splits {
        let rename = |u: &String| fresh[&(domain.clone(), u.clone())].clone();
        let remap = |m: &BTreeMap<String, String>| m.iter().map(|(u, i)| (rename(u), i.clone())).collect();
        let shuffled = DatasetSplit {
            domain: split.domain.clone(),
            train_sequences: split
                .train_sequences
                .iter()
                .map(|s| UserSequence {
                    user: rename(&s.user),
                    ..s.clone()
                })
                .collect(),
            valid_targets: remap(&split.valid_targets),
            test_targets: remap(&split.test_targets),
            item_vocab: split.item_vocab.clone(),
            item_entity_links: split.item_entity_links.clone(),
        };
        out.insert(domain.clone(), shuffled);
    }
    Ok(out)
}

/// Removes exactly `round(|T| * remove_ratio)` triples chosen uniformly.
pub fn perturb_kg_sparsity(kg: &KnowledgeGraph, remove_ratio: f64, seed: u64) -> Result<KnowledgeGraph> {
    if !(0.0..1.0).contains(&remove_ratio) {
        return Err(Error::Argument(format!("remove ratio must lie in [0, 1), got {remove_ratio}")));
    }
    let n = kg.triples.len();
    let n_remove = (n as f64 * remove_ratio).round() as usize;
    if n_remove == 0 {
        return Ok(kg.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Sparsity));
    let removed: HashSet<usize> = order[..n_remove].iter().copied().collect();
    let (triples, sources) = kg
        .triples
        .iter()
        .zip(&kg.sources)
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, (t, s))| (t.clone(), s.clone()))
        .unzip();
    Ok(KnowledgeGraph::assemble(triples, sources))
}

/// Model item indices over one or more domains. Index 0 is padding; real
/// items are numbered from 1, domain by domain in the given order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct ItemVocabulary {
    items: Vec<(String, String)>,
    index: BTreeMap<(String, String), usize>,
}

impl From<Vec<(String, String)>> for ItemVocabulary {
    fn from(items: Vec<(String, String)>) -> Self {
        let index = items.iter().cloned().enumerate().map(|(i, k)| (k, i + 1)).collect();
        Self { items, index }
    }
}

impl From<ItemVocabulary> for Vec<(String, String)> {
    fn from(v: ItemVocabulary) -> Self {
        v.items
    }
}

impl ItemVocabulary {
    pub fn from_splits<'a>(splits: impl IntoIterator<Item = &'a DatasetSplit>) -> Self {
        let mut items = Vec::new();
        let mut seen = HashSet::new();
        for split in splits {
            for item in &split.item_vocab {
                let key = (split.domain.clone(), item.clone());
                if seen.insert(key.clone()) {
                    items.push(key);
                }
            }
        }
        items.into()
    }

    /// Number of real items.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, domain: &str, item: &str) -> Option<usize> {
        self.index.get(&(domain.to_string(), item.to_string())).copied()
    }

    /// `(domain, item)` behind a 1-based index.
    pub fn entry(&self, index: usize) -> Option<&(String, String)> {
        index.checked_sub(1).and_then(|i| self.items.get(i))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.items
    }

    pub fn indices_of(&self, domain: &str) -> Vec<usize> {
        (1..=self.items.len()).filter(|&i| self.items[i - 1].0 == domain).collect()
    }

    /// Maps a sequence of item ids of one domain to indices.
    pub fn encode(&self, domain: &str, items: &[String]) -> Result<Vec<usize>> {
        let missing: Vec<String> = items.iter().filter(|i| self.get(domain, i).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Lookup { kind: "item", ids: missing });
        }
        Ok(items.iter().map(|i| self.index[&(domain.to_string(), i.clone())]).collect())
    }

    /// Keeps one domain; returns the sub-vocabulary and the old index of each
    /// retained item in new order.
    pub fn restrict(&self, domain: &str) -> (Self, Vec<usize>) {
        let keep = self.indices_of(domain);
        let items = keep.iter().map(|&i| self.items[i - 1].clone()).collect::<Vec<_>>();
        (items.into(), keep)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EntityFrequency {
    /// Number of triples each entity participates in (head or tail).
    pub per_entity: BTreeMap<String, usize>,
    /// frequency → number of entities with that frequency.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn entity_frequency_stats(kg: &KnowledgeGraph) -> EntityFrequency {
    let mut per_entity: BTreeMap<String, usize> = BTreeMap::new();
    for t in &kg.triples {
        *per_entity.entry(t.head.clone()).or_default() += 1;
        if t.tail != t.head {
            *per_entity.entry(t.tail.clone()).or_default() += 1;
        }
    }
    let mut histogram = BTreeMap::new();
    for &f in per_entity.values() {
        *histogram.entry(f).or_default() += 1;
    }
    EntityFrequency { per_entity, histogram }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn kg_of(domains: &[(&str, &[&str])]) -> KnowledgeGraph {
        KnowledgeGraph::from_domains(domains.iter().map(|(d, rels)| {
            (d.to_string(), rels.iter().map(|r| Triple::new("h", *r, format!("t_{d}"))).collect())
        }))
        .unwrap()
    }

    #[test]
    fn interactions_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "u1\tb\t2\nu1\ta\t1\nu1\tc\t3\nu2\tx\t1\nu2\ty\t2\n");
        let seqs = load_interactions(&p, "A", &LoadOptions::default()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].user, "u1");
        assert_eq!(seqs[0].items, vec!["a", "b", "c"]);
    }

    #[test]
    fn vocabulary_numbers_domains_in_order() {
        let mk = |d: &str, items: &[&str]| DatasetSplit {
            domain: d.into(),
            item_vocab: items.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        let v = ItemVocabulary::from_splits(&[mk("A", &["a", "b"]), mk("B", &["a"])]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.get("B", "a"), Some(3));
        assert_eq!(v.indices_of("A"), vec![1, 2]);
        assert!(v.encode("A", &["c".to_string()]).is_err());
        let (sub, old) = v.restrict("B");
        assert_eq!(sub.get("B", "a"), Some(1));
        assert_eq!(old, vec![3]);
        assert_eq!(v.entry(0), None);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "u\tz\t5\nu\ta\t5\nu\tm\t1\n");
        let seqs = load_interactions(&p, "A", &LoadOptions::default()).unwrap();
        assert_eq!(seqs[0].items, vec!["m", "z", "a"]);
    }

    #[test]
    fn malformed_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "u\ta\t1\nu\tb\tnot-a-time\n");
        match load_interactions(&p, "A", &LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_result_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "u\ta\t1\n");
        assert!(matches!(
            load_interactions(&p, "A", &LoadOptions::default()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn rating_filter_drops_non_positive_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "u\ta\t1\t5\nu\tb\t2\t3\nu\tc\t3\t4\nu\td\t4\t4.5\n");
        let opts = LoadOptions {
            min_len: 3,
            min_rating: Some(3.0),
        };
        let seqs = load_interactions(&p, "A", &opts).unwrap();
        assert_eq!(seqs[0].items, vec!["a", "c", "d"]);
    }

    #[test]
    fn partition_set_algebra() {
        let kg = kg_of(&[("s", &["a", "b", "c"]), ("t", &["b", "c", "d"])]);
        let p = RelationPartition::from_graph(&kg);
        assert_eq!(p.shared, vec!["b", "c"]);
        assert_eq!(p.specific, vec!["a", "d"]);
        assert_eq!(p.specific_in(&kg, "s"), vec!["a"]);
    }

    #[test]
    fn identical_vocabularies_have_no_specific_relations() {
        let kg = kg_of(&[("s", &["a", "b"]), ("t", &["a", "b"])]);
        let p = RelationPartition::from_graph(&kg);
        assert!(p.specific.is_empty());
        assert_eq!(p.shared.len(), 2);
    }

    #[test]
    fn partition_needs_two_domains() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "kg.tsv", "a\tr\tb\n");
        let paths = BTreeMap::from([("only".to_string(), p)]);
        assert!(matches!(load_kg_and_partition(&paths), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_kg_file_is_io_error() {
        let paths = BTreeMap::from([
            ("a".to_string(), PathBuf::from("/nonexistent/a.tsv")),
            ("b".to_string(), PathBuf::from("/nonexistent/b.tsv")),
        ]);
        assert!(matches!(load_kg_and_partition(&paths), Err(Error::Io { .. })));
    }

    #[test]
    fn duplicate_triples_are_merged() {
        let t = Triple::new("a", "r", "b");
        let kg = KnowledgeGraph::from_domains([("s", vec![t.clone(), t.clone()]), ("t", vec![t])]).unwrap();
        assert_eq!(kg.num_triples(), 1);
        assert_eq!(kg.domain_tags["r"].len(), 2);
    }

    fn seq(user: &str, items: &[&str]) -> UserSequence {
        UserSequence {
            user: user.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            domain: "D".into(),
        }
    }

    #[test]
    fn leave_one_out_examples() {
        let split = leave_one_out_split(&[seq("u", &["a", "b", "c", "d", "e"]), seq("v", &["a", "b", "c"])]).unwrap();
        assert_eq!(split.train_sequences[0].items, vec!["a", "b", "c"]);
        assert_eq!(split.valid_targets["u"], "d");
        assert_eq!(split.test_targets["u"], "e");
        assert_eq!(split.train_sequences[1].items, vec!["a"]);
        assert_eq!(split.valid_targets["v"], "b");
        assert_eq!(split.test_targets["v"], "c");
        assert_eq!(split.item_vocab, vec!["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn leave_one_out_rejects_short_sequences() {
        match leave_one_out_split(&[seq("ok", &["a", "b", "c"]), seq("short", &["a", "b"])]) {
            Err(Error::SequenceTooShort(users)) => assert_eq!(users, vec!["short"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shuffle_makes_domains_disjoint() {
        let a = leave_one_out_split(&[seq("u1", &["a", "b", "c"])]).unwrap();
        let b = leave_one_out_split(&[seq("u1", &["x", "y", "z"])]).unwrap();
        let splits = BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)]);
        let out = shuffle_user_identities(&splits, 3).unwrap();
        let ua = &out["A"].train_sequences[0].user;
        let ub = &out["B"].train_sequences[0].user;
        assert_ne!(ua, ub);
        assert_eq!(out["A"].train_sequences[0].items, vec!["a"]);
        assert_eq!(out["B"].test_targets[ub], "z");
        assert_eq!(out, shuffle_user_identities(&splits, 3).unwrap());
    }

    #[test]
    fn sparsity_removes_exact_count() {
        let triples: Vec<Triple> = (0..100).map(|i| Triple::new(format!("e{i}"), "r", "hub")).collect();
        let kg = KnowledgeGraph::from_domains([("A", triples)]).unwrap();
        let sparse = perturb_kg_sparsity(&kg, 0.2, 1).unwrap();
        assert_eq!(sparse.num_triples(), 80);
        assert_eq!(sparse.entities.len(), 81);
        assert_eq!(perturb_kg_sparsity(&kg, 0.0, 1).unwrap(), kg);
        assert!(perturb_kg_sparsity(&kg, 1.0, 1).is_err());
    }

    #[test]
    fn sparsity_is_reproducible() {
        let triples: Vec<Triple> = (0..10).map(|i| Triple::new(format!("e{i}"), "r", format!("f{i}"))).collect();
        let kg = KnowledgeGraph::from_domains([("A", triples)]).unwrap();
        let a = perturb_kg_sparsity(&kg, 0.5, 99).unwrap();
        let b = perturb_kg_sparsity(&kg, 0.5, 99).unwrap();
        assert_eq!(a.num_triples(), 5);
        assert_eq!(a.triples, b.triples);
    }

    #[test]
    fn entity_frequencies() {
        let kg = KnowledgeGraph::from_domains([(
            "A",
            vec![Triple::new("a", "r", "b"), Triple::new("a", "r", "c")],
        )])
        .unwrap();
        let stats = entity_frequency_stats(&kg);
        assert_eq!(stats.per_entity["a"], 2);
        assert_eq!(stats.per_entity["b"], 1);
        assert_eq!(stats.per_entity["c"], 1);
        assert_eq!(stats.histogram, BTreeMap::from([(1, 2), (2, 1)]));
        assert_eq!(stats.histogram.values().sum::<usize>(), kg.entities.len());
    }
}
