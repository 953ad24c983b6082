//! Binary masks over the flat parameter vector, global magnitude pruning,
//! and the two masked update rules: zeroing (lottery) and freezing (rise).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// `bits[i]` is true iff parameter `i` is in the active (winning) set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
    active: usize,
}

impl Mask {
    pub fn ones(n: usize) -> Self {
        Mask { bits: vec![true; n], active: n }
    }

    pub fn zeros(n: usize) -> Self {
        Mask { bits: vec![false; n], active: 0 }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let active = bits.iter().filter(|&&b| b).count();
        Mask { bits, active }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn is_all_ones(&self) -> bool {
        self.active == self.bits.len()
    }

    /// Indices of active entries, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    /// Active entries among those flagged in `subset` (e.g. weights only).
    pub fn active_within(&self, subset: &[bool]) -> usize {
        self.bits.iter().zip(subset).filter(|(&b, &s)| b && s).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        check_len(self.len(), other.len())?;
        Ok(Mask::from_bits(self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect()))
    }

    /// True when every active entry of `self` is also active in `other`.
    pub fn is_submask_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Packed blob: N as u64 little-endian, then `ceil(N / 8)` bytes, bit `i` at byte `i / 8`, bit position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len().div_ceil(8));
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |acc, (j, &b)| acc | ((b as u8) << j)));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Mask> {
        let bad = |detail: String| Error::Format { what: "mask blob", detail };
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| bad(format!("{} bytes is shorter than the 8-byte header", bytes.len())))?;
        let n = u64::from_le_bytes(header) as usize;
        let body = &bytes[8..];
        if body.len() != n.div_ceil(8) {
            return Err(bad(format!("{n} entries need {} packed bytes, found {}", n.div_ceil(8), body.len())));
        }
        let bits = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask::from_bits(bits))
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Length { expected, got })
    }
}

/// Number of entries kept when retaining `retain` percent of `n`: `ceil`, at least 1.
pub fn keep_count(retain: f64, n: usize) -> usize {
    // the product is formed before dividing so integral percentages stay exact
    let exact = retain * n as f64 / 100.0;
    let kept = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    kept.clamp(1, n.max(1))
}

pub fn validate_retain(retain: f64) -> Result<()> {
    if retain > 0.0 && retain <= 100.0 {
        Ok(())
    } else {
        Err(Error::Retain(retain))
    }
}

/// Global magnitude pruning over the active prunable entries of `prior`.
///
/// Keeps the `keep_count(retain, active)` largest `|w|` among entries that are
/// active in `prior` and flagged in `prunable`; equal magnitudes keep the lower
/// index. Non-prunable entries (biases) are carried over from `prior` unchanged.
pub fn magnitude_prune(params: &[f64], retain: f64, prior: &Mask, prunable: &[bool]) -> Result<Mask> {
    validate_retain(retain)?;
    check_len(prior.len(), params.len())?;
    check_len(prior.len(), prunable.len())?;
    let mut candidates: Vec<usize> = (0..params.len()).filter(|&i| prior.bits[i] && prunable[i]).collect();
    if candidates.is_empty() {
        return Err(Error::EmptyMask);
    }
    let keep = keep_count(retain, candidates.len());
    candidates.sort_by(|&a, &b| params[b].abs().total_cmp(&params[a].abs()).then(a.cmp(&b)));
    let mut bits = prior.bits.clone();
    for &i in &candidates[keep..] {
        bits[i] = false;
    }
    Ok(Mask::from_bits(bits))
}

/// Elementwise product: inactive entries become exactly zero.
pub fn apply_mask(params: &[f64], mask: &Mask) -> Result<ParamVector> {
    check_len(mask.len(), params.len())?;
    Ok(params.iter().zip(&mask.bits).map(|(&w, &m)| if m { w } else { 0.0 }).collect::<Vec<_>>().into())
}

/// `w - u` on active entries, `0` elsewhere.
pub fn lot_update(params: &[f64], update: &[f64], mask: &Mask) -> Result<ParamVector> {
    check_len(mask.len(), params.len())?;
    check_len(mask.len(), update.len())?;
    Ok(params
        .iter()
        .zip(update)
        .zip(&mask.bits)
        .map(|((&w, &u), &m)| if m { w - u } else { 0.0 })
        .collect::<Vec<_>>()
        .into())
}

/// Snapshot that inactive entries are locked to during a rise run.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenReference {
    values: ParamVector,
}

impl FrozenReference {
    pub fn new(values: ParamVector) -> Self {
        FrozenReference { values }
    }

    pub fn values(&self) -> &ParamVector {
        &self.values
    }
}

/// `w - u` on active entries, the frozen value elsewhere.
pub fn rise_update(params: &[f64], update: &[f64], mask: &Mask, frozen: &FrozenReference) -> Result<ParamVector> {
    check_len(mask.len(), params.len())?;
    check_len(mask.len(), update.len())?;
    check_len(mask.len(), frozen.values.len())?;
    Ok(params
        .iter()
        .zip(update)
        .zip(&mask.bits)
        .zip(frozen.values.iter())
        .map(|(((&w, &u), &m), &f)| if m { w - u } else { f })
        .collect::<Vec<_>>()
        .into())
}

/// Sidecar metadata written next to a mask blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub n: usize,
    pub active_count: usize,
    pub retain_percent: f64,
    pub iteration: usize,
    pub k: usize,
}

/// Writes `<stem>.mask` and `<stem>.json`; returns the blob path.
pub fn write_mask(stem: &Path, mask: &Mask, retain_percent: f64, iteration: usize, k: usize) -> Result<PathBuf> {
    let blob = stem.with_extension("mask");
    fs::write(&blob, mask.to_bytes()).map_err(|e| Error::path(&blob, e))?;
    let record = MaskRecord { n: mask.len(), active_count: mask.active_count(), retain_percent, iteration, k };
    let side = stem.with_extension("json");
    fs::write(&side, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::path(&side, e))?;
    Ok(blob)
}

/// Reads a mask blob and its sidecar, checking that they agree.
pub fn read_mask(stem: &Path) -> Result<(Mask, MaskRecord)> {
    let blob = stem.with_extension("mask");
    let bytes = fs::read(&blob).map_err(|e| Error::path(&blob, e))?;
    let mask = Mask::from_bytes(&bytes)?;
    let side = stem.with_extension("json");
    let record: MaskRecord = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::path(&side, e))?)?;
    if record.n != mask.len() || record.active_count != mask.active_count() {
        return Err(Error::Format {
            what: "mask sidecar",
            detail: format!(
                "sidecar says n={} active={}, blob has n={} active={}",
                record.n,
                record.active_count,
                mask.len(),
                mask.active_count()
            ),
        });
    }
    Ok((mask, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(b: &[u8]) -> Mask {
        Mask::from_bits(b.iter().map(|&x| x == 1).collect())
    }

    /// Sort-by-magnitude oracle over the active prunable set.
    fn oracle_prune(w: &[f64], r: f64, prior: &[bool], prunable: &[bool]) -> Vec<bool> {
        let mut active: Vec<(f64, usize)> =
            (0..w.len()).filter(|&i| prior[i] && prunable[i]).map(|i| (w[i].abs(), i)).collect();
        let keep = ((r / 100.0 * active.len() as f64 - 1e-9).ceil() as usize).max(1);
        // bubble sort by (magnitude desc, index asc), kept deliberately naive
        for a in 0..active.len() {
            for b in 0..active.len() - 1 - a {
                let (x, y) = (active[b], active[b + 1]);
                if x.0 < y.0 || (x.0 == y.0 && x.1 > y.1) {
                    active.swap(b, b + 1);
                }
            }
        }
        let mut out = prior.to_vec();
        for &(_, i) in &active[keep..] {
            out[i] = false;
        }
        out
    }

    #[test]
    fn prune_examples() {
        let all = [true; 4];
        let m = magnitude_prune(&[0.5, -0.2, 0.1, -0.9], 50.0, &Mask::ones(4), &all).unwrap();
        assert_eq!(m, bits(&[1, 0, 0, 1]));
        let w = [0.5, -0.2, 0.1, -0.9];
        assert_eq!(magnitude_prune(&w, 100.0, &bits(&[1, 1, 0, 1]), &all).unwrap(), bits(&[1, 1, 0, 1]));
        let m = magnitude_prune(&[0.3, -0.7, 0.2, 0.9], 50.0, &bits(&[1, 0, 1, 1]), &all).unwrap();
        assert_eq!(m, bits(&[1, 0, 0, 1]));
    }

    #[test]
    fn prune_errors() {
        let all = [true; 2];
        assert!(matches!(magnitude_prune(&[1.0, 2.0], 0.0, &Mask::ones(2), &all), Err(Error::Retain(_))));
        assert!(matches!(magnitude_prune(&[1.0, 2.0], 100.5, &Mask::ones(2), &all), Err(Error::Retain(_))));
        assert!(matches!(magnitude_prune(&[1.0, 2.0], 50.0, &Mask::zeros(2), &all), Err(Error::EmptyMask)));
        assert!(magnitude_prune(&[1.0], 50.0, &Mask::ones(2), &all).is_err());
    }

    #[test]
    fn biases_are_never_pruned() {
        let prunable = [true, false, true, true];
        let m = magnitude_prune(&[0.5, 0.0, 0.1, -0.9], 10.0, &Mask::ones(4), &prunable).unwrap();
        assert_eq!(m, bits(&[0, 1, 0, 1]));
    }

    #[test]
    fn ties_keep_lower_index() {
        let m = magnitude_prune(&[0.5, -0.5, 0.5, 0.5], 50.0, &Mask::ones(4), &[true; 4]).unwrap();
        assert_eq!(m, bits(&[1, 1, 0, 0]));
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(50.0, 3), 2);
        assert_eq!(keep_count(10.0, 1000), 100);
        assert_eq!(keep_count(50.0, keep_count(50.0, 1000)), 250);
        assert_eq!(keep_count(1.0, 5), 1);
        assert_eq!(keep_count(100.0, 7), 7);
        assert_eq!(keep_count(33.0, 100), 33);
    }

    #[test]
    fn update_rule_examples() {
        let m = bits(&[1, 0]);
        assert_eq!(apply_mask(&[1.5, -2.0], &m).unwrap().into_vec(), vec![1.5, 0.0]);
        assert_eq!(apply_mask(&[1.5, -2.0], &Mask::ones(2)).unwrap().into_vec(), vec![1.5, -2.0]);
        let w = [1.0, 2.0];
        let u = [0.1, 0.5];
        assert_eq!(lot_update(&w, &u, &m).unwrap().into_vec(), vec![0.9, 0.0]);
        assert_eq!(lot_update(&w, &u, &Mask::ones(2)).unwrap().into_vec(), vec![0.9, 1.5]);
        assert_eq!(lot_update(&w, &[0.0, 0.0], &m).unwrap(), apply_mask(&w, &m).unwrap());
        let frozen = FrozenReference::new(vec![0.8, 2.0].into());
        assert_eq!(rise_update(&w, &u, &m, &frozen).unwrap().into_vec(), vec![0.9, 2.0]);
        assert_eq!(rise_update(&w, &u, &Mask::ones(2), &frozen).unwrap().into_vec(), vec![0.9, 1.5]);
        let frozen = FrozenReference::new(vec![-3.25, 7.5].into());
        assert_eq!(rise_update(&w, &u, &Mask::zeros(2), &frozen).unwrap(), *frozen.values());
        assert!(lot_update(&w, &u[..1], &m).is_err());
        assert!(rise_update(&w, &u, &bits(&[1]), &frozen).is_err());
    }

    #[test]
    fn blob_layout_and_round_trip() {
        let m = bits(&[1, 0, 1, 1, 0, 0, 0, 0, 1]);
        let b = m.to_bytes();
        assert_eq!(&b[..8], &9u64.to_le_bytes());
        assert_eq!(&b[8..], &[0b0000_1101, 0b0000_0001]);
        assert_eq!(Mask::from_bytes(&b).unwrap(), m);
        assert!(Mask::from_bytes(&b[..9]).is_err());
        assert!(Mask::from_bytes(&b[..4]).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ticket");
        let m = bits(&[1, 0, 1]);
        write_mask(&stem, &m, 50.0, 1, 5).unwrap();
        let (back, rec) = read_mask(&stem).unwrap();
        assert_eq!(back, m);
        assert_eq!(rec, MaskRecord { n: 3, active_count: 2, retain_percent: 50.0, iteration: 1, k: 5 });
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>, f64)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(prop::bool::weighted(0.8), n),
                prop::collection::vec(prop::bool::weighted(0.85), n),
                0.5f64..100.0,
            )
        })
    }

    proptest! {
        #[test]
        fn prune_matches_oracle_and_is_submask((w, prior, prunable, r) in arb_case()) {
            let prior_mask = Mask::from_bits(prior.clone());
            let active = prior_mask.active_within(&prunable);
            prop_assume!(active > 0);
            let m = magnitude_prune(&w, r, &prior_mask, &prunable).unwrap();
            let expect = oracle_prune(&w, r, &prior, &prunable);
            prop_assert_eq!(m.bits(), expect.as_slice());
            prop_assert!(m.is_submask_of(&prior_mask));
            prop_assert_eq!(m.and(&prior_mask).unwrap(), m.clone());
            prop_assert_eq!(m.active_within(&prunable), keep_count(r, active));
            prop_assert!(m.active_within(&prunable) >= 1);
        }

        #[test]
        fn prune_commutes_with_permutation(
            (w, prior, _, r) in arb_case(),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = w.len();
            let mut mags: Vec<f64> = w.iter().map(|x| x.abs()).collect();
            mags.sort_by(f64::total_cmp);
            prop_assume!(mags.windows(2).all(|p| p[0] < p[1]));
            let prior_mask = Mask::from_bits(prior.clone());
            prop_assume!(prior_mask.active_count() > 0);
            let all = vec![true; n];
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let pp = Mask::from_bits(perm.iter().map(|&i| prior[i]).collect());
            let direct = magnitude_prune(&w, r, &prior_mask, &all).unwrap();
            let permuted = magnitude_prune(&pw, r, &pp, &all).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(permuted.is_active(j), direct.is_active(i));
            }
        }

        #[test]
        fn zero_and_freeze_invariants(
            (w, prior, _, _) in arb_case(),
            steps in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 60), 1..8),
        ) {
            let n = w.len();
            let mask = Mask::from_bits(prior);
            let frozen = FrozenReference::new(w.iter().map(|x| x * 0.5 + 0.125).collect::<Vec<_>>().into());
            let mut lot = apply_mask(&w, &mask).unwrap();
            let mut rise = ParamVector::from(w.clone());
            for u in &steps {
                lot = lot_update(&lot, &u[..n], &mask).unwrap();
                rise = rise_update(&rise, &u[..n], &mask, &frozen).unwrap();
                for i in (0..n).filter(|&i| !mask.is_active(i)) {
                    prop_assert_eq!(lot[i].to_bits(), 0.0f64.to_bits());
                    prop_assert_eq!(rise[i].to_bits(), frozen.values()[i].to_bits());
                }
            }
        }

        #[test]
        fn blob_round_trip(b in prop::collection::vec(any::<bool>(), 0..200)) {
            let m = Mask::from_bits(b);
            prop_assert_eq!(Mask::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }
}
