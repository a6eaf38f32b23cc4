//! TransE entity/relation embeddings trained with a margin ranking loss.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeGraph, RelationPartition, Triple};
use crate::error::{Error, Result};
use crate::io::{read_f32_array, write_f32_array};
use crate::rng::{self, Purpose};
use crate::tensor::{l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgeConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            margin: 1.0,
            learning_rate: 0.05,
            epochs: 200,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

impl KgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Argument("kge dim must be at least 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Argument(format!("kge margin must be non-negative, got {}", self.margin)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("kge learning rate must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Argument("at least one negative per positive is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    pub entity_emb: Matrix<f64>,
    pub relation_emb: Matrix<f64>,
    pub entity_index: BTreeMap<String, usize>,
    pub relation_index: BTreeMap<String, usize>,
    /// Summed hinge loss of every completed epoch.
    pub loss_history: Vec<f64>,
    pub seed: u64,
}

/// A triple resolved to embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexedTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl KgeModel {
    pub fn dim(&self) -> usize {
        self.entity_emb.cols()
    }

    /// Row indices of a triple, or a lookup error naming the unknown ids.
    pub fn index(&self, t: &Triple) -> Result<IndexedTriple> {
        let mut missing = Vec::new();
        let head = self.entity_index.get(&t.head).copied();
        let relation = self.relation_index.get(&t.relation).copied();
        let tail = self.entity_index.get(&t.tail).copied();
        if head.is_none() {
            missing.push(t.head.clone());
        }
        if relation.is_none() {
            missing.push(t.relation.clone());
        }
        if tail.is_none() {
            missing.push(t.tail.clone());
        }
        match (head, relation, tail) {
            (Some(head), Some(relation), Some(tail)) => Ok(IndexedTriple { head, relation, tail }),
            _ => Err(Error::Lookup {
                kind: "kg",
                ids: missing,
            }),
        }
    }

    fn residual(&self, t: IndexedTriple) -> Vec<f64> {
        let h = self.entity_emb.row(t.head);
        let r = self.relation_emb.row(t.relation);
        let o = self.entity_emb.row(t.tail);
        h.iter().zip(r).zip(o).map(|((h, r), o)| h + r - o).collect()
    }

    pub fn distance(&self, t: IndexedTriple) -> f64 {
        l2_norm(&self.residual(t))
    }
}

/// `‖h + r − o‖₂`.
pub fn score_triple(model: &KgeModel, t: &Triple) -> Result<f64> {
    Ok(model.distance(model.index(t)?))
}

/// `Σᵢ [γ + d(posᵢ) − d(negᵢ)]₊` over index-aligned pairs.
pub fn transe_loss(model: &KgeModel, positives: &[Triple], negatives: &[Triple], margin: f64) -> Result<f64> {
    if positives.len() != negatives.len() {
        return Err(Error::Argument(format!(
            "{} positives but {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let mut total = 0.0;
    for (p, n) in positives.iter().zip(negatives) {
        total += hinge(margin + model.distance(model.index(p)?) - model.distance(model.index(n)?));
    }
    Ok(total)
}

#[inline]
fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Gradient of one hinge term, accumulated into dense entity/relation buffers.
///
/// The subgradient at the kink (and at zero distance) is zero.
pub fn transe_pair_gradient(
    model: &KgeModel,
    pos: IndexedTriple,
    neg: IndexedTriple,
    margin: f64,
    d_entity: &mut Matrix<f64>,
    d_relation: &mut Matrix<f64>,
) -> f64 {
    let rp = model.residual(pos);
    let rn = model.residual(neg);
    let dp = l2_norm(&rp);
    let dn = l2_norm(&rn);
    let value = margin + dp - dn;
    if value <= 0.0 {
        return 0.0;
    }
    accumulate_distance_grad(pos, &rp, dp, 1.0, d_entity, d_relation);
    accumulate_distance_grad(neg, &rn, dn, -1.0, d_entity, d_relation);
    value
}

fn accumulate_distance_grad(
    t: IndexedTriple,
    residual: &[f64],
    dist: f64,
    sign: f64,
    d_entity: &mut Matrix<f64>,
    d_relation: &mut Matrix<f64>,
) {
    if dist == 0.0 {
        return;
    }
    for (k, &v) in residual.iter().enumerate() {
        let g = sign * v / dist;
        d_entity.row_mut(t.head)[k] += g;
        d_relation.row_mut(t.relation)[k] += g;
        d_entity.row_mut(t.tail)[k] -= g;
    }
}

/// Uniformly initialized, untrained model over the graph's vocabularies.
pub fn init_kge(kg: &KnowledgeGraph, cfg: &KgeConfig) -> Result<KgeModel> {
    cfg.validate()?;
    let entity_index: BTreeMap<String, usize> = kg.entities.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
    let relation_index: BTreeMap<String, usize> =
        kg.relations.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut rng = rng::stream(cfg.seed, Purpose::KgeInit);
    let mut draw = |rows: usize| {
        let data = (0..rows * cfg.dim).map(|_| rng.random_range(-bound..bound)).collect();
        Matrix::from_vec(rows, cfg.dim, data)
    };
    let entity_emb = draw(entity_index.len())?;
    let relation_emb = draw(relation_index.len())?;
    Ok(KgeModel {
        entity_emb,
        relation_emb,
        entity_index,
        relation_index,
        loss_history: Vec::new(),
        seed: cfg.seed,
    })
}

fn corrupt(
    t: IndexedTriple,
    n_entities: usize,
    observed: &HashSet<IndexedTriple>,
    rng: &mut impl Rng,
) -> IndexedTriple {
    const MAX_ATTEMPTS: usize = 64;
    let mut candidate = t;
    for _ in 0..MAX_ATTEMPTS {
        candidate = t;
        let e = rng.random_range(0..n_entities);
        if rng.random_bool(0.5) {
            candidate.head = e;
        } else {
            candidate.tail = e;
        }
        if !observed.contains(&candidate) {
            break;
        }
    }
    candidate
}

fn normalize_rows(m: &mut Matrix<f64>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = l2_norm(row);
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Stochastic gradient descent on the margin loss, one positive at a time,
/// with entity rows renormalized after every epoch.
pub fn train_kge(kg: &KnowledgeGraph, cfg: &KgeConfig) -> Result<KgeModel> {
    if kg.triples.is_empty() {
        return Err(Error::Argument("cannot train embeddings on an empty graph".into()));
    }
    let mut model = init_kge(kg, cfg)?;
    let positives: Vec<IndexedTriple> = kg.triples.iter().map(|t| model.index(t)).collect::<Result<_>>()?;
    let observed: HashSet<IndexedTriple> = positives.iter().copied().collect();
    let n_entities = model.entity_emb.rows();
    let dim = cfg.dim;
    let mut rng = rng::stream(cfg.seed, Purpose::KgeSampling);
    let mut order: Vec<usize> = (0..positives.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let pos = positives[i];
            for _ in 0..cfg.negatives_per_positive {
                let neg = corrupt(pos, n_entities, &observed, &mut rng);
                let rp = model.residual(pos);
                let rn = model.residual(neg);
                let dp = l2_norm(&rp);
                let dn = l2_norm(&rn);
                let value = cfg.margin + dp - dn;
                if value <= 0.0 {
                    continue;
                }
                epoch_loss += value;
                // Sparse update of the five touched rows.
                for k in 0..dim {
                    let gp = if dp > 0.0 { rp[k] / dp } else { 0.0 };
                    let gn = if dn > 0.0 { rn[k] / dn } else { 0.0 };
                    let lr = cfg.learning_rate;
                    let e = model.entity_emb.as_mut_slice();
                    e[pos.head * dim + k] -= lr * gp;
                    e[pos.tail * dim + k] += lr * gp;
                    e[neg.head * dim + k] += lr * gn;
                    e[neg.tail * dim + k] -= lr * gn;
                    model.relation_emb.as_mut_slice()[pos.relation * dim + k] -= lr * (gp - gn);
                }
            }
        }
        normalize_rows(&mut model.entity_emb);
        model.loss_history.push(epoch_loss);
    }
    Ok(model)
}

/// Relation matrices in partition order: `(R_shared, R_spec)`.
pub fn export_relation_matrices(model: &KgeModel, part: &RelationPartition) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let missing: Vec<String> = part
        .shared
        .iter()
        .chain(&part.specific)
        .filter(|r| !model.relation_index.contains_key(*r))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Lookup {
            kind: "relation",
            ids: missing,
        });
    }
    let rows = |ids: &[String]| {
        let idx: Vec<usize> = ids.iter().map(|r| model.relation_index[r]).collect();
        model.relation_emb.select_rows(&idx)
    };
    Ok((rows(&part.shared), rows(&part.specific)))
}

#[derive(Debug, Serialize, Deserialize)]
struct KgeManifest {
    format: String,
    dim: usize,
    n_entities: usize,
    n_relations: usize,
    seed: String,
    epochs_trained: usize,
    entities: Vec<String>,
    relations: Vec<String>,
    loss_history: Vec<f64>,
}

const KGE_FORMAT: &str = "kgbridge-kge/1";

/// Writes `manifest.toml`, `entity_emb.f32` and `relation_emb.f32`.
pub fn save_kge(model: &KgeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ordered = |index: &BTreeMap<String, usize>| {
        let mut ids = vec![String::new(); index.len()];
        for (id, &row) in index {
            ids[row] = id.clone();
        }
        ids
    };
    let manifest = KgeManifest {
        format: KGE_FORMAT.into(),
        dim: model.dim(),
        n_entities: model.entity_emb.rows(),
        n_relations: model.relation_emb.rows(),
        seed: model.seed.to_string(),
        epochs_trained: model.loss_history.len(),
        entities: ordered(&model.entity_index),
        relations: ordered(&model.relation_index),
        loss_history: model.loss_history.clone(),
    };
    crate::io::write_toml(&dir.join("manifest.toml"), &manifest)?;
    write_f32_array(&dir.join("entity_emb.f32"), &model.entity_emb.cast::<f32>())?;
    write_f32_array(&dir.join("relation_emb.f32"), &model.relation_emb.cast::<f32>())?;
    Ok(())
}

pub fn load_kge(dir: &Path) -> Result<KgeModel> {
    let path = dir.join("manifest.toml");
    let manifest: KgeManifest = crate::io::read_toml(&path)?;
    if manifest.format != KGE_FORMAT {
        return Err(Error::checkpoint(&path, format!("unsupported format `{}`", manifest.format)));
    }
    let entity_emb = read_f32_array(&dir.join("entity_emb.f32"), manifest.n_entities, manifest.dim)?;
    let relation_emb = read_f32_array(&dir.join("relation_emb.f32"), manifest.n_relations, manifest.dim)?;
    if manifest.entities.len() != manifest.n_entities || manifest.relations.len() != manifest.n_relations {
        return Err(Error::checkpoint(&path, "id list length disagrees with declared counts"));
    }
    Ok(KgeModel {
        entity_emb: entity_emb.cast(),
        relation_emb: relation_emb.cast(),
        entity_index: manifest.entities.into_iter().enumerate().map(|(i, e)| (e, i)).collect(),
        relation_index: manifest.relations.into_iter().enumerate().map(|(i, r)| (r, i)).collect(),
        loss_history: manifest.loss_history,
        seed: manifest
            .seed
            .parse()
            .map_err(|_| Error::checkpoint(&path, "seed is not an integer"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(entities: &[(&str, [f64; 2])], relations: &[(&str, [f64; 2])]) -> KgeModel {
        let ent: Vec<Vec<f64>> = entities.iter().map(|(_, v)| v.to_vec()).collect();
        let rel: Vec<Vec<f64>> = relations.iter().map(|(_, v)| v.to_vec()).collect();
        KgeModel {
            entity_emb: Matrix::from_rows(&ent).unwrap(),
            relation_emb: Matrix::from_rows(&rel).unwrap(),
            entity_index: entities.iter().enumerate().map(|(i, (n, _))| (n.to_string(), i)).collect(),
            relation_index: relations.iter().enumerate().map(|(i, (n, _))| (n.to_string(), i)).collect(),
            loss_history: vec![],
            seed: 0,
        }
    }

    fn square() -> KgeModel {
        toy_model(
            &[("zero", [0.0, 0.0]), ("x", [1.0, 0.0]), ("y", [0.0, 1.0])],
            &[("r", [1.0, 0.0])],
        )
    }

    #[test]
    fn score_examples() {
        let m = square();
        assert_eq!(score_triple(&m, &Triple::new("zero", "r", "x")).unwrap(), 0.0);
        assert_eq!(score_triple(&m, &Triple::new("zero", "r", "zero")).unwrap(), 1.0);
        let s = score_triple(&m, &Triple::new("zero", "r", "y")).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unknown_id_is_lookup_error() {
        let m = square();
        match score_triple(&m, &Triple::new("zero", "nope", "ghost")) {
            Err(Error::Lookup { ids, .. }) => assert_eq!(ids, vec!["nope", "ghost"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_examples() {
        let m = square();
        let pos = vec![Triple::new("zero", "r", "x")];
        let neg = vec![Triple::new("zero", "r", "y")];
        // 1 + 0 - sqrt(2) < 0
        assert_eq!(transe_loss(&m, &pos, &neg, 1.0).unwrap(), 0.0);
        assert_eq!(transe_loss(&m, &pos, &pos, 1.0).unwrap(), 1.0);
        assert_eq!(transe_loss(&m, &pos, &neg, 0.0).unwrap(), 0.0);
        assert!(transe_loss(&m, &pos, &[], 1.0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let kg = KnowledgeGraph::from_domains([("A", vec![Triple::new("a", "r", "b")])]).unwrap();
        let cfg = KgeConfig {
            dim: 4,
            epochs: 0,
            ..Default::default()
        };
        let trained = train_kge(&kg, &cfg).unwrap();
        assert_eq!(trained, init_kge(&kg, &cfg).unwrap());
    }

    #[test]
    fn export_follows_partition_order() {
        let m = toy_model(&[("e", [0.0, 0.0])], &[("r1", [1.0, 2.0]), ("r2", [3.0, 4.0])]);
        let part = RelationPartition {
            shared: vec!["r1".into()],
            specific: vec![],
        };
        let (shared, spec) = export_relation_matrices(&m, &part).unwrap();
        assert_eq!(shared.as_slice(), &[1.0, 2.0]);
        assert_eq!(spec.shape(), (0, 2));

        let permuted = RelationPartition {
            shared: vec!["r2".into(), "r1".into()],
            specific: vec![],
        };
        let (p, _) = export_relation_matrices(&m, &permuted).unwrap();
        assert_eq!(p.row(0), m.relation_emb.row(1));
        assert_eq!(p.row(1), m.relation_emb.row(0));

        let bad = RelationPartition {
            shared: vec!["missing".into()],
            specific: vec![],
        };
        assert!(matches!(export_relation_matrices(&m, &bad), Err(Error::Lookup { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(KgeConfig { dim: 0, ..Default::default() }.validate().is_err());
        assert!(KgeConfig { margin: -1.0, ..Default::default() }.validate().is_err());
        assert!(KgeConfig::default().validate().is_ok());
    }
}
