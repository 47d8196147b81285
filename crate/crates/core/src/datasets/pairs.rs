use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::ImageSample;
use crate::{Error, Result};

/// Indices into the sample list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MatchingPair {
    pub reference: usize,
    pub query: usize,
    pub same_identity: bool,
}

/// Exactly `n_same` same-identity and `n_diff` different-identity pairs,
/// all distinct, drawn from annotated samples only.
pub fn build_matching_pairs(
    samples: &[ImageSample],
    n_same: usize,
    n_diff: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MatchingPair>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.landmarks.is_some() {
            groups.entry(s.identity_id).or_default().push(i);
        }
    }
    let annotated: usize = groups.values().map(Vec::len).sum();

    let mut same_candidates = Vec::new();
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                same_candidates.push((i, j));
            }
        }
    }
    if same_candidates.len() < n_same {
        return Err(Error::Invalid(format!(
            "{n_same} same-identity pairs requested but only {} exist ({} identities with at least 2 annotated renders)",
            same_candidates.len(),
            groups.values().filter(|m| m.len() >= 2).count()
        )));
    }
    let diff_total = annotated * annotated.saturating_sub(1) / 2 - same_candidates.len();
    if diff_total < n_diff {
        return Err(Error::Invalid(format!(
            "{n_diff} different-identity pairs requested but only {diff_total} exist ({} annotated identities)",
            groups.len()
        )));
    }

    let mut pairs = Vec::with_capacity(n_same + n_diff);
    for k in index::sample(rng, same_candidates.len(), n_same) {
        let (i, j) = same_candidates[k];
        let (reference, query) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
        pairs.push(MatchingPair { reference, query, same_identity: true });
    }

    let ids: Vec<(usize, u64)> =
        groups.iter().flat_map(|(&id, members)| members.iter().map(move |&i| (i, id))).collect();
    if diff_total <= 4 * n_diff {
        let mut all = Vec::with_capacity(diff_total);
        for (a, &(i, ia)) in ids.iter().enumerate() {
            for &(j, ib) in &ids[a + 1..] {
                if ia != ib {
                    all.push((i, j));
                }
            }
        }
        all.shuffle(rng);
        all.truncate(n_diff);
        for (i, j) in all {
            let (reference, query) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            pairs.push(MatchingPair { reference, query, same_identity: false });
        }
    } else {
        let mut seen = HashSet::with_capacity(n_diff);
        while seen.len() < n_diff {
            let (i, ia) = ids[rng.random_range(0..ids.len())];
            let (j, ib) = ids[rng.random_range(0..ids.len())];
            if ia != ib && seen.insert((i.min(j), i.max(j))) {
                pairs.push(MatchingPair { reference: i, query: j, same_identity: false });
            }
        }
    }
    Ok(pairs)
}
