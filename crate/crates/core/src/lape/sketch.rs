//! Mergeable quantile sketch with deterministic compaction.
//!
//! Level `h` holds items of weight `2^h`. When a level reaches capacity it is
//! sorted and every other item is promoted; the parity of the kept half
//! alternates per level so consecutive compactions do not bias the same way.
//! Everything is deterministic: the same insert and merge sequence yields the
//! same sketch.

use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 256;
/// Capacity for sketches summarizing a whole population rather than one cell.
pub const POOLED_K: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSketch {
    k: usize,
    n: u64,
    levels: Vec<Vec<f32>>,
    odd: Vec<bool>,
}

impl Default for QuantileSketch {
    fn default() -> Self {
        QuantileSketch::new(DEFAULT_K)
    }
}

impl QuantileSketch {
    pub fn new(k: usize) -> Self {
        let k = k.max(4);
        QuantileSketch { k, n: 0, levels: vec![Vec::new()], odd: vec![false] }
    }

    pub fn from_values(k: usize, values: impl IntoIterator<Item = f32>) -> Self {
        let mut s = QuantileSketch::new(k);
        for v in values {
            s.insert(v);
        }
        s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of values summarized.
    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Number of retained items.
    pub fn retained(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn insert(&mut self, v: f32) {
        self.n += 1;
        self.levels[0].push(v);
        if self.levels[0].len() >= self.k {
            self.compact_from(0);
        }
    }

    fn compact_from(&mut self, mut h: usize) {
        while h < self.levels.len() && self.levels[h].len() >= self.k {
            if h + 1 == self.levels.len() {
                self.levels.push(Vec::new());
                self.odd.push(false);
            }
            let mut items = std::mem::take(&mut self.levels[h]);
            items.sort_unstable_by(f32::total_cmp);
            // An odd leftover stays behind at this level.
            let leftover = (items.len() % 2 == 1).then(|| items.pop().unwrap());
            let start = usize::from(self.odd[h]);
            self.odd[h] = !self.odd[h];
            let promoted: Vec<f32> = items.iter().skip(start).step_by(2).copied().collect();
            self.levels[h + 1].extend(promoted);
            self.levels[h].extend(leftover);
            h += 1;
        }
    }

    pub fn merge(&mut self, other: &QuantileSketch) {
        while self.levels.len() < other.levels.len() {
            self.levels.push(Vec::new());
            self.odd.push(false);
        }
        for (h, items) in other.levels.iter().enumerate() {
            self.levels[h].extend_from_slice(items);
        }
        self.n += other.n;
        for h in 0..self.levels.len() {
            if self.levels[h].len() >= self.k {
                self.compact_from(h);
            }
        }
    }

    fn weighted(&self) -> Vec<(f32, u64)> {
        let mut items: Vec<(f32, u64)> = self
            .levels
            .iter()
            .enumerate()
            .flat_map(|(h, l)| l.iter().map(move |&v| (v, 1u64 << h)))
            .collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        items
    }

    /// Estimated number of summarized values `<= x`.
    pub fn rank(&self, x: f32) -> u64 {
        self.levels
            .iter()
            .enumerate()
            .map(|(h, l)| l.iter().filter(|&&v| v <= x).count() as u64 * (1u64 << h))
            .sum()
    }

    /// Nearest-rank percentile, `pct` in `[0, 100]`. `None` when empty.
    pub fn percentile(&self, pct: f64) -> Option<f32> {
        if self.n == 0 {
            return None;
        }
        let total: u64 = self.weighted().iter().map(|w| w.1).sum();
        let target = nearest_rank(pct, total as usize) as u64;
        let mut cum = 0;
        let items = self.weighted();
        for &(v, w) in &items {
            cum += w;
            if cum >= target {
                return Some(v);
            }
        }
        items.last().map(|x| x.0)
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        out.extend((self.k as u32).to_le_bytes());
        out.extend(self.n.to_le_bytes());
        out.extend((self.levels.len() as u32).to_le_bytes());
        for (items, &odd) in self.levels.iter().zip(&self.odd) {
            out.push(u8::from(odd));
            out.extend((items.len() as u32).to_le_bytes());
            for v in items {
                out.extend(v.to_le_bytes());
            }
        }
    }

    pub(crate) fn read_from(r: &mut super::stats::ByteReader) -> crate::Result<Self> {
        let k = r.u32()? as usize;
        let n = r.u64()?;
        let n_levels = r.u32()? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        let mut odd = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            odd.push(r.u8()? != 0);
            let len = r.u32()? as usize;
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(r.f32()?);
            }
            levels.push(items);
        }
        if levels.is_empty() {
            levels.push(Vec::new());
            odd.push(false);
        }
        Ok(QuantileSketch { k, n, levels, odd })
    }
}

/// 1-based nearest rank for `pct` percent of `n` sorted values, clamped to `[1, n]`.
pub fn nearest_rank(pct: f64, n: usize) -> usize {
    let r = (pct * n as f64 / 100.0).ceil();
    (r.max(1.0) as usize).min(n.max(1))
}

/// Exact nearest-rank percentile; `None` for an empty slice.
pub fn percentile_exact(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Some(sorted[nearest_rank(pct, sorted.len()) - 1])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn max_rank_error(sketch: &QuantileSketch, values: &[f32]) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f32::total_cmp);
        let n = sorted.len() as f64;
        (0..=100)
            .map(|i| {
                let x = sorted[((sorted.len() - 1) * i) / 100];
                let truth = sorted.partition_point(|&v| v <= x) as f64;
                (sketch.rank(x) as f64 - truth).abs() / n
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn nearest_rank_matches_definition() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_exact(&v, 95.0), Some(95.0));
        assert_eq!(percentile_exact(&v, 0.0), Some(1.0));
        assert_eq!(percentile_exact(&v, 100.0), Some(100.0));
        assert_eq!(percentile_exact(&[7.0], 50.0), Some(7.0));
        assert_eq!(percentile_exact(&[], 50.0), None);
    }

    #[test]
    fn small_streams_are_exact() {
        let s = QuantileSketch::from_values(256, (1..=100).map(|x| x as f32));
        assert_eq!(s.percentile(95.0), Some(95.0));
        assert_eq!(s.rank(50.0), 50);
    }

    #[test]
    fn rank_error_stays_below_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..200_000).map(|_| rng.gen::<f32>().powi(3) * 10.0 - 1.0).collect();
        let s = QuantileSketch::from_values(DEFAULT_K, values.iter().copied());
        assert_eq!(s.count(), values.len() as u64);
        assert!(s.retained() < 20 * DEFAULT_K);
        assert!(max_rank_error(&s, &values) < 0.01);
    }

    #[test]
    fn merged_sketch_stays_within_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f32> = (0..60_000).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut merged = QuantileSketch::new(DEFAULT_K);
        for chunk in values.chunks(777) {
            merged.merge(&QuantileSketch::from_values(DEFAULT_K, chunk.iter().copied()));
        }
        assert_eq!(merged.count(), values.len() as u64);
        assert!(max_rank_error(&merged, &values) < 0.01);
    }
}
