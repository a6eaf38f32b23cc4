//! Two-domain corpus with a planted, relation-mediated transition pattern.
//!
//! Items fall into clusters; every item of cluster `c` is linked in the
//! graph to the hub entity `hub{c}` through shared relation
//! `shared_r{c mod n_shared}`, in both domains. A user's next item stays in
//! the current item's cluster with probability `pattern_strength` and is
//! uniform over the domain otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DomainPaths;
use crate::error::{Error, Result};
use crate::io::{write_text, write_toml};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Domain names; the last one is the fine-tuning target.
    pub domains: [String; 2],
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_shared: usize,
    /// Domain-specific relation count per domain.
    pub n_specific: [usize; 2],
    pub pattern_strength: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: ["A".into(), "B".into()],
            n_users: 200,
            n_items: 50,
            n_clusters: 5,
            n_shared: 3,
            n_specific: [2, 2],
            pattern_strength: 0.8,
            min_len: 6,
            max_len: 15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_clusters", self.n_clusters),
            ("n_shared", self.n_shared),
            ("n_specific[0]", self.n_specific[0]),
            ("n_specific[1]", self.n_specific[1]),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
        if self.n_clusters < self.n_shared {
            return Err(Error::Argument(format!(
                "n_clusters ({}) must cover every shared relation ({})",
                self.n_clusters, self.n_shared
            )));
        }
        let most = self.n_clusters.max(self.n_specific[0]).max(self.n_specific[1]);
        if self.n_items < most {
            return Err(Error::Argument(format!("n_items must be at least {most} so every relation occurs")));
        }
        if !(0.0..=1.0).contains(&self.pattern_strength) {
            return Err(Error::Argument(format!("pattern_strength must lie in [0, 1], got {}", self.pattern_strength)));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Argument(format!(
                "sequence lengths need 3 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.domains[0] == self.domains[1] {
            return Err(Error::Argument("domain names must differ".into()));
        }
        Ok(())
    }

    pub fn item_name(&self, domain: usize, item: usize) -> String {
        format!("{}_i{item}", self.domains[domain])
    }

    pub fn cluster_of(&self, item: usize) -> usize {
        item % self.n_clusters
    }
}

/// Files written for one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub domains: BTreeMap<String, DomainPaths>,
    pub target: String,
}

/// Samples one item-index sequence per user for a single domain.
pub fn sample_sequences(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let members: Vec<Vec<usize>> = (0..spec.n_clusters)
        .map(|c| (0..spec.n_items).filter(|&i| spec.cluster_of(i) == c).collect())
        .collect();
    (0..spec.n_users)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut cur = rng.random_range(0..spec.n_items);
            let mut seq = vec![cur];
            while seq.len() < len {
                cur = if rng.random::<f64>() < spec.pattern_strength {
                    let peers = &members[spec.cluster_of(cur)];
                    peers[rng.random_range(0..peers.len())]
                } else {
                    rng.random_range(0..spec.n_items)
                };
                seq.push(cur);
            }
            seq
        })
        .collect()
}

/// Writes interactions, graph and link files for both domains plus an
/// `experiment.toml` pointing at them.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::Synthetic);
    let mut domains = BTreeMap::new();
    for (d, name) in spec.domains.iter().enumerate() {
        let dir = out.join(name);
        let mut interactions = String::new();
        for (u, seq) in sample_sequences(spec, &mut rng).iter().enumerate() {
            for (t, &item) in seq.iter().enumerate() {
                writeln!(interactions, "u{u}\t{}\t{}", spec.item_name(d, item), t + 1).expect("string write");
            }
        }
        let mut kg = String::new();
        let mut links = String::new();
        for item in 0..spec.n_items {
            let entity = format!("{name}_e{item}");
            writeln!(links, "{}\t{entity}", spec.item_name(d, item)).expect("string write");
            let c = spec.cluster_of(item);
            writeln!(kg, "{entity}\tshared_r{}\thub{c}", c % spec.n_shared).expect("string write");
            let j = item % spec.n_specific[d];
            writeln!(kg, "{entity}\t{name}_r{j}\t{name}_attr{}", item % 7).expect("string write");
        }
        let paths = DomainPaths {
            interactions: dir.join("interactions.tsv"),
            kg: dir.join("kg.tsv"),
            links: Some(dir.join("links.tsv")),
        };
        write_text(&paths.interactions, &interactions)?;
        write_text(&paths.kg, &kg)?;
        write_text(paths.links.as_ref().expect("set above"), &links)?;
        domains.insert(name.clone(), paths);
    }
    write_toml(&out.join("synthetic.toml"), spec)?;
    let corpus = SyntheticCorpus {
        root: out.to_path_buf(),
        domains,
        target: spec.domains[1].clone(),
    };
    let cfg = super::ExperimentConfig::for_corpus(&corpus);
    write_toml(&out.join("experiment.toml"), &cfg)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_interactions, load_kg_and_partition, LoadOptions};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn partition_recovers_requested_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_users: 10,
            n_items: 12,
            n_shared: 3,
            n_specific: [2, 2],
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let kg_paths = corpus.domains.iter().map(|(d, p)| (d.clone(), p.kg.clone())).collect();
        let (kg, part) = load_kg_and_partition(&kg_paths).unwrap();
        assert_eq!(part.shared.len(), 3);
        assert_eq!(part.specific_in(&kg, "A").len(), 2);
        assert_eq!(part.specific_in(&kg, "B").len(), 2);
        let seqs = load_interactions(&corpus.domains["A"].interactions, "A", &LoadOptions::default()).unwrap();
        assert_eq!(seqs.len(), 10);
    }

    #[test]
    fn zero_strength_transitions_are_uniform() {
        let spec = SyntheticSpec {
            n_users: 1000,
            n_items: 20,
            pattern_strength: 0.0,
            min_len: 11,
            max_len: 11,
            ..Default::default()
        };
        let mut rng = rng::stream(3, Purpose::Synthetic);
        let mut counts = vec![0f64; spec.n_items];
        let mut n = 0.0;
        for seq in sample_sequences(&spec, &mut rng) {
            for &next in &seq[1..] {
                counts[next] += 1.0;
                n += 1.0;
            }
        }
        assert_eq!(n, 10_000.0);
        let expected = n / spec.n_items as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((spec.n_items - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn fixed_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_users: 15, ..Default::default() };
        generate_synthetic_corpus(&spec, a.path()).unwrap();
        generate_synthetic_corpus(&spec, b.path()).unwrap();
        for f in ["A/interactions.tsv", "A/kg.tsv", "B/links.tsv", "experiment.toml"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SyntheticSpec { n_users: 0, ..Default::default() },
            SyntheticSpec { n_shared: 6, n_clusters: 5, ..Default::default() },
            SyntheticSpec { pattern_strength: 1.5, ..Default::default() },
            SyntheticSpec { min_len: 2, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
