//! Permutation schemes: the first pair is always the identity, the rest are
//! drawn uniformly (with replacement) from the admissible group, optionally
//! restricted by exchangeability blocks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Generator used for every scheme; seeded by `seed_from_u64`.
pub type SchemeRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockMode {
    /// Observations are shuffled only among members of their own block.
    Within,
    /// Blocks of equal size are shuffled as units; order inside a block is kept.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockStructure {
    labels: Vec<i64>,
    mode: BlockMode,
}

impl BlockStructure {
    pub fn new(labels: Vec<i64>, mode: BlockMode) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidBlocks("no block labels given".into()));
        }
        Ok(Self { labels, mode })
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn mode(&self) -> BlockMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member indices of each block, blocks ordered by first appearance.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut index: BTreeMap<i64, usize> = BTreeMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            let g = *index.entry(label).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups
    }

    /// Restriction to the observations in `keep` (in that order).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.labels.len()) {
            return Err(Error::InvalidBlocks(format!(
                "index {bad} out of range for {} labels",
                self.labels.len()
            )));
        }
        Self::new(keep.iter().map(|&i| self.labels[i]).collect(), self.mode)
    }

    /// Size of the admissible permutation group (as a float; may be infinite).
    pub fn admissible_count(&self) -> f64 {
        let groups = self.groups();
        match self.mode {
            BlockMode::Within => groups.iter().map(|g| factorial(g.len())).product(),
            BlockMode::Whole => {
                let mut by_size: BTreeMap<usize, usize> = BTreeMap::new();
                for g in &groups {
                    *by_size.entry(g.len()).or_default() += 1;
                }
                by_size.values().map(|&c| factorial(c)).product()
            }
        }
    }

    fn sample(&self, rng: &mut SchemeRng) -> Vec<usize> {
        let n = self.labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let groups = self.groups();
        match self.mode {
            BlockMode::Within => {
                for g in &groups {
                    let mut shuffled = g.clone();
                    shuffled.shuffle(rng);
                    for (&dst, &src) in g.iter().zip(&shuffled) {
                        perm[dst] = src;
                    }
                }
            }
            BlockMode::Whole => {
                let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (b, g) in groups.iter().enumerate() {
                    by_size.entry(g.len()).or_default().push(b);
                }
                for blocks in by_size.values() {
                    let mut shuffled = blocks.clone();
                    shuffled.shuffle(rng);
                    for (&dst, &src) in blocks.iter().zip(&shuffled) {
                        for (&i, &j) in groups[dst].iter().zip(&groups[src]) {
                            perm[i] = j;
                        }
                    }
                }
            }
        }
        perm
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Row `i` of a permuted matrix is row `py[i]` (left) or `px[i]` (right) of
/// the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPair {
    pub py: Vec<usize>,
    pub px: Vec<usize>,
}

impl PermutationPair {
    pub fn identity(n1: usize, n2: usize) -> Self {
        Self {
            py: (0..n1).collect(),
            px: (0..n2).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        is_identity(&self.py) && is_identity(&self.px)
    }
}

pub fn is_identity(p: &[usize]) -> bool {
    p.iter().enumerate().all(|(i, &v)| i == v)
}

pub fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

#[derive(Debug, Clone)]
pub struct PermutationScheme {
    pub pairs: Vec<PermutationPair>,
    pub seed: u64,
    /// Non-fatal conditions found while building, e.g. a permutation group
    /// smaller than the requested count.
    pub warnings: Vec<String>,
}

impl PermutationScheme {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `j - 1` random pairs after the identity. When `both_sides` is set the
/// right side is shuffled independently; otherwise it stays in place.
pub fn build_scheme(
    n_prime: usize,
    n_dprime: usize,
    j: usize,
    blocks: Option<&BlockStructure>,
    both_sides: bool,
    seed: u64,
) -> Result<PermutationScheme> {
    if j < 2 {
        return Err(Error::InvalidOptions(format!(
            "need at least 2 permutations (identity plus one), got {j}"
        )));
    }
    let mut warnings = Vec::new();
    if let Some(b) = blocks {
        if both_sides {
            return Err(Error::InvalidOptions(
                "exchangeability blocks require a common row space; both-side permutation is not allowed".into(),
            ));
        }
        if b.len() != n_prime {
            return Err(Error::InvalidBlocks(format!(
                "{} block labels for {} permutable rows",
                b.len(),
                n_prime
            )));
        }
        let count = b.admissible_count();
        if count < j as f64 {
            let msg = format!(
                "only {count} admissible permutations for {j} requested; sampling with replacement"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    } else if factorial(n_prime) < j as f64 {
        let msg = format!(
            "only {} permutations of {n_prime} rows for {j} requested; sampling with replacement",
            factorial(n_prime)
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut rng = SchemeRng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(j);
    pairs.push(PermutationPair::identity(n_prime, n_dprime));
    for _ in 1..j {
        let py = match blocks {
            Some(b) => b.sample(&mut rng),
            None => {
                let mut p: Vec<usize> = (0..n_prime).collect();
                p.shuffle(&mut rng);
                p
            }
        };
        let px = if both_sides {
            let mut p: Vec<usize> = (0..n_dprime).collect();
            p.shuffle(&mut rng);
            p
        } else {
            (0..n_dprime).collect()
        };
        pairs.push(PermutationPair { py, px });
    }
    Ok(PermutationScheme {
        pairs,
        seed,
        warnings,
    })
}

/// All `n!` permutations of one side in lexicographic order (identity first).
pub fn exhaustive_scheme(n_prime: usize, max_j: usize) -> Result<PermutationScheme> {
    let total = factorial(n_prime);
    if total > max_j as f64 {
        return Err(Error::TooLarge(format!(
            "{n_prime}! = {total} permutations exceeds the limit of {max_j}"
        )));
    }
    let mut current: Vec<usize> = (0..n_prime).collect();
    let mut pairs = Vec::with_capacity(total as usize);
    loop {
        pairs.push(PermutationPair {
            py: current.clone(),
            px: (0..n_prime).collect(),
        });
        if !next_permutation(&mut current) {
            break;
        }
    }
    Ok(PermutationScheme {
        pairs,
        seed: 0,
        warnings: Vec::new(),
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn identity_first_and_deterministic() {
        let a = build_scheme(5, 5, 3, None, false, 42).unwrap();
        let b = build_scheme(5, 5, 3, None, false, 42).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert!(a.pairs[0].is_identity());
        assert_eq!(a.len(), 3);
        for pair in &a.pairs {
            assert!(is_bijection(&pair.py));
            assert!(is_identity(&pair.px));
        }
        let c = build_scheme(5, 5, 3, None, false, 43).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn both_sides_draws_independent_right_permutations() {
        let s = build_scheme(6, 8, 50, None, true, 1).unwrap();
        assert!(s.pairs[1..].iter().any(|p| !is_identity(&p.px)));
        assert!(s.pairs.iter().all(|p| p.py.len() == 6 && p.px.len() == 8));
    }

    #[test]
    fn within_block_membership() {
        let blocks = BlockStructure::new(vec![1, 1, 2, 2], BlockMode::Within).unwrap();
        let s = build_scheme(4, 4, 200, Some(&blocks), false, 3).unwrap();
        let mut seen = BTreeSet::new();
        for pair in &s.pairs {
            let p = &pair.py;
            assert!(p[0] < 2 && p[1] < 2 && p[2] >= 2 && p[3] >= 2);
            seen.insert(p.clone());
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn whole_block_enumeration() {
        let blocks = BlockStructure::new(vec![7, 7, 9, 9], BlockMode::Whole).unwrap();
        assert_eq!(blocks.admissible_count(), 2.0);
        let s = build_scheme(4, 4, 100, Some(&blocks), false, 4).unwrap();
        let seen: BTreeSet<Vec<usize>> = s.pairs.iter().map(|p| p.py.clone()).collect();
        let expected: BTreeSet<Vec<usize>> = [vec![0, 1, 2, 3], vec![2, 3, 0, 1]].into_iter().collect();
        assert_eq!(seen, expected);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn whole_block_keeps_unequal_sizes_in_place() {
        let blocks = BlockStructure::new(vec![0, 0, 1, 1, 1, 2, 2], BlockMode::Whole).unwrap();
        let s = build_scheme(7, 7, 50, Some(&blocks), false, 5).unwrap();
        for pair in &s.pairs {
            assert_eq!(&pair.py[2..5], &[2, 3, 4]);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(build_scheme(5, 5, 1, None, false, 0), Err(Error::InvalidOptions(_))));
        let blocks = BlockStructure::new(vec![0, 0, 1], BlockMode::Within).unwrap();
        assert!(matches!(
            build_scheme(4, 4, 10, Some(&blocks), false, 0),
            Err(Error::InvalidBlocks(_))
        ));
        assert!(matches!(
            build_scheme(3, 3, 10, Some(&blocks), true, 0),
            Err(Error::InvalidOptions(_))
        ));
    }

    #[test]
    fn exhaustive_cases() {
        let s = exhaustive_scheme(3, 1000).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.pairs[0].py, vec![0, 1, 2]);
        assert_eq!(s.pairs[5].py, vec![2, 1, 0]);

        assert_eq!(exhaustive_scheme(1, 10).unwrap().len(), 1);

        let s = exhaustive_scheme(4, 100).unwrap();
        let set: BTreeSet<Vec<usize>> = s.pairs.iter().map(|p| p.py.clone()).collect();
        assert_eq!(set.len(), 24);
        assert!(s.pairs.windows(2).all(|w| w[0].py < w[1].py));

        assert!(matches!(exhaustive_scheme(8, 1000), Err(Error::TooLarge(_))));
    }

    proptest::proptest! {
        #[test]
        fn every_sample_is_a_bijection(n in 1usize..40, seed in 0u64..1000, both in proptest::bool::ANY) {
            let s = build_scheme(n, n + 3, 5, None, both, seed).unwrap();
            for pair in &s.pairs {
                proptest::prop_assert!(is_bijection(&pair.py));
                proptest::prop_assert!(is_bijection(&pair.px));
            }
        }
    }
}
