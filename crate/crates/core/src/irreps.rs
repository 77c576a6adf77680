//! Feature layouts, per-atom equivariant tensors and (k, l)-block masks.
//!
//! Flat order within a layout: ascending `l`, then channel `k`, then
//! `m ∈ [−l, l]`. Every (k, l) block is therefore a contiguous run of `2l + 1`
//! columns.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::so3::{wigner_d, Rotation};
use crate::tape::Mat;
use crate::{Error, Result};

/// Channel multiplicity per order `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IrrepsLayout {
    mult: Vec<usize>,
}

impl IrrepsLayout {
    /// `mult[l]` channels at order `l`; trailing zero orders are kept.
    pub fn new(mult: Vec<usize>) -> Self {
        assert!(!mult.is_empty(), "layout needs at least the l = 0 entry");
        Self { mult }
    }

    /// `channels` channels at every order up to `l_max`.
    pub fn uniform(l_max: usize, channels: usize) -> Self {
        Self::new(vec![channels; l_max + 1])
    }

    /// Scalars only.
    pub fn scalars(channels: usize) -> Self {
        Self::new(vec![channels])
    }

    pub fn l_max(&self) -> usize {
        self.mult.len() - 1
    }

    /// Multiplicity at `l`, zero beyond `l_max`.
    pub fn mult(&self, l: usize) -> usize {
        self.mult.get(l).copied().unwrap_or(0)
    }

    pub fn mults(&self) -> &[usize] {
        &self.mult
    }

    pub fn width(&self) -> usize {
        self.mult.iter().enumerate().map(|(l, &k)| k * (2 * l + 1)).sum()
    }

    /// First column of the order-`l` section.
    pub fn offset(&self, l: usize) -> usize {
        self.mult.iter().take(l).enumerate().map(|(l, &k)| k * (2 * l + 1)).sum()
    }

    /// Flat column of `(k, l, m)` with `m ∈ [−l, l]`.
    pub fn index(&self, k: usize, l: usize, m: i64) -> usize {
        debug_assert!(k < self.mult(l) && m.unsigned_abs() as usize <= l);
        self.offset(l) + k * (2 * l + 1) + (m + l as i64) as usize
    }

    /// Columns of block `(k, l)`.
    pub fn block(&self, k: usize, l: usize) -> Range<usize> {
        let start = self.offset(l) + k * (2 * l + 1);
        start..start + 2 * l + 1
    }

    pub fn n_blocks(&self) -> usize {
        self.mult.iter().sum()
    }

    /// All `(l, k)` blocks in flat order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mult.iter().enumerate().flat_map(|(l, &n)| (0..n).map(move |k| (l, k)))
    }

    /// Orders with at least one channel.
    pub fn active_orders(&self) -> impl Iterator<Item = usize> + '_ {
        self.mult.iter().enumerate().filter(|(_, &n)| n > 0).map(|(l, _)| l)
    }

    /// Same multiplicities, padded with zeros to a common `l_max`.
    pub fn same_shape(&self, other: &IrrepsLayout) -> bool {
        let n = self.mult.len().max(other.mult.len());
        (0..n).all(|l| self.mult(l) == other.mult(l))
    }
}

impl std::fmt::Display for IrrepsLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.mult.iter().enumerate().map(|(l, k)| format!("{k}x{l}")).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// Per-atom features: one row per atom, one column per layout component.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    layout: IrrepsLayout,
    values: Mat<f64>,
}

impl FeatureTensor {
    pub fn new(layout: IrrepsLayout, values: Mat<f64>) -> Result<Self> {
        if values.cols != layout.width() {
            return Err(Error::LayoutMismatch(format!(
                "{} columns for layout {layout} of width {}",
                values.cols,
                layout.width()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: IrrepsLayout, n_atoms: usize) -> Self {
        let values = Mat::zeros(n_atoms, layout.width());
        Self { layout, values }
    }

    pub fn layout(&self) -> &IrrepsLayout {
        &self.layout
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn into_values(self) -> Mat<f64> {
        self.values
    }

    pub fn n_atoms(&self) -> usize {
        self.values.rows
    }

    /// Components of block `(k, l)` for atom `atom`.
    pub fn block(&self, atom: usize, k: usize, l: usize) -> &[f64] {
        &self.values.row(atom)[self.layout.block(k, l)]
    }

    /// Applies `D^l(g)` to every block.
    pub fn rotate(&self, g: &Rotation) -> FeatureTensor {
        let blocks: Vec<_> = (0..=self.layout.l_max()).map(|l| wigner_d(l, g)).collect();
        let mut out = self.values.clone();
        for r in 0..out.rows {
            for (l, k) in self.layout.blocks() {
                let cols = self.layout.block(k, l);
                let rotated = blocks[l].apply(&self.values.row(r)[cols.clone()]);
                out.row_mut(r)[cols].copy_from_slice(&rotated);
            }
        }
        FeatureTensor { layout: self.layout.clone(), values: out }
    }
}

/// Keep bits for one layer: `keep[l][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    layout: IrrepsLayout,
    keep: Vec<Vec<bool>>,
}

impl LayerMask {
    pub fn ones(layout: &IrrepsLayout) -> Self {
        Self::filled(layout, true)
    }

    pub fn zeros(layout: &IrrepsLayout) -> Self {
        Self::filled(layout, false)
    }

    fn filled(layout: &IrrepsLayout, bit: bool) -> Self {
        let keep = layout.mults().iter().map(|&n| vec![bit; n]).collect();
        Self { layout: layout.clone(), keep }
    }

    pub fn from_bits(layout: &IrrepsLayout, keep: Vec<Vec<bool>>) -> Result<Self> {
        let ok = keep.len() == layout.mults().len()
            && keep.iter().enumerate().all(|(l, bits)| bits.len() == layout.mult(l));
        if !ok {
            return Err(Error::LayoutMismatch(format!("mask bits do not match layout {layout}")));
        }
        Ok(Self { layout: layout.clone(), keep })
    }

    pub fn layout(&self) -> &IrrepsLayout {
        &self.layout
    }

    pub fn keep(&self, k: usize, l: usize) -> bool {
        self.keep[l][k]
    }

    pub fn set(&mut self, k: usize, l: usize, bit: bool) {
        self.keep[l][k] = bit;
    }

    pub fn bits(&self, l: usize) -> &[bool] {
        self.keep.get(l).map_or(&[], Vec::as_slice)
    }

    pub fn kept(&self, l: usize) -> usize {
        self.bits(l).iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.keep.iter().flatten().all(|&b| b)
    }

    /// Per-column 0/1 factors in the layout's flat order.
    pub fn column_factors(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.width()];
        for (l, k) in self.layout.blocks() {
            if self.keep[l][k] {
                out[self.layout.block(k, l)].fill(1.0);
            }
        }
        out
    }

    /// Retained columns in flat order.
    pub fn kept_columns(&self) -> Vec<usize> {
        self.layout.blocks().filter(|&(l, k)| self.keep[l][k]).flat_map(|(l, k)| self.layout.block(k, l)).collect()
    }

    /// Compacted layout and the order-preserving channel map.
    pub fn slice_layout(&self) -> (IrrepsLayout, ChannelMap) {
        let map = ChannelMap::from_mask(self);
        (map.target_layout(), map)
    }
}

/// Old-to-new channel indices per order for a compaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMap {
    source: IrrepsLayout,
    /// `kept[l]` lists retained old channels in ascending order.
    kept: Vec<Vec<usize>>,
}

impl ChannelMap {
    pub fn identity(layout: &IrrepsLayout) -> Self {
        Self::from_mask(&LayerMask::ones(layout))
    }

    pub fn from_mask(mask: &LayerMask) -> Self {
        let kept = mask
            .keep
            .iter()
            .map(|bits| bits.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect())
            .collect();
        Self { source: mask.layout.clone(), kept }
    }

    pub fn from_kept(source: &IrrepsLayout, kept: Vec<Vec<usize>>) -> Result<Self> {
        if kept.len() != source.mults().len() {
            return Err(Error::LayoutMismatch("channel map order count".into()));
        }
        for (l, ks) in kept.iter().enumerate() {
            if ks.iter().any(|&k| k >= source.mult(l)) || ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Invalid(format!("channel map at l = {l} is out of range or unordered")));
            }
        }
        Ok(Self { source: source.clone(), kept })
    }

    pub fn source_layout(&self) -> &IrrepsLayout {
        &self.source
    }

    pub fn target_layout(&self) -> IrrepsLayout {
        IrrepsLayout::new(self.kept.iter().map(Vec::len).collect())
    }

    /// Retained old channels at `l`.
    pub fn kept(&self, l: usize) -> &[usize] {
        self.kept.get(l).map_or(&[], Vec::as_slice)
    }

    /// New index of old channel `k` at order `l`.
    pub fn get(&self, k: usize, l: usize) -> Option<usize> {
        self.kept(l).binary_search(&k).ok()
    }

    /// Source columns feeding each target column.
    pub fn source_columns(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (l, ks) in self.kept.iter().enumerate() {
            for &k in ks {
                out.extend(self.source.block(k, l));
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.kept.iter().enumerate().all(|(l, ks)| ks.len() == self.source.mult(l))
    }
}

/// Keep bits for every layer of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn new(layers: Vec<LayerMask>) -> Self {
        Self { layers }
    }

    pub fn ones(layouts: &[IrrepsLayout]) -> Self {
        Self { layers: layouts.iter().map(LayerMask::ones).collect() }
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn layer(&self, t: usize) -> &LayerMask {
        &self.layers[t]
    }

    pub fn layer_mut(&mut self, t: usize) -> &mut LayerMask {
        &mut self.layers[t]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers.iter().all(LayerMask::is_all_ones)
    }

    /// One `layer l k keep` line per block.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# layer l k keep\n");
        for (t, m) in self.layers.iter().enumerate() {
            for (l, k) in m.layout.blocks() {
                let _ = writeln!(s, "{t} {l} {k} {}", u8::from(m.keep[l][k]));
            }
        }
        s
    }

    /// Parses [`PruneMask::to_text`] output against known layer layouts.
    pub fn from_text(text: &str, layouts: &[IrrepsLayout]) -> Result<Self> {
        let mut layers: Vec<LayerMask> = layouts.iter().map(LayerMask::zeros).collect();
        let mut seen: Vec<Vec<Vec<bool>>> = layers.iter().map(|m| m.keep.clone()).collect();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let (t, l, k, bit) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
            if t >= layers.len() || k >= layers[t].layout.mult(l) || bit > 1 {
                return Err(err(format!("block ({t}, {l}, {k}) = {bit} does not fit the model")));
            }
            layers[t].keep[l][k] = bit == 1;
            seen[t][l][k] = true;
        }
        if let Some(t) = seen.iter().position(|s| s.iter().flatten().any(|&b| !b)) {
            return Err(Error::Invalid(format!("mask file leaves blocks of layer {t} unspecified")));
        }
        Ok(Self { layers })
    }
}

/// Zeroes every component of each dropped (k, l) block.
pub fn apply_block_mask(h: &FeatureTensor, z: &LayerMask) -> Result<FeatureTensor> {
    if !h.layout.same_shape(&z.layout) {
        return Err(Error::LayoutMismatch(format!("features {} vs mask {}", h.layout, z.layout)));
    }
    let mut values = h.values.clone();
    for (l, k) in h.layout.blocks() {
        if z.keep[l][k] {
            continue;
        }
        let cols = h.layout.block(k, l);
        for r in 0..values.rows {
            values.row_mut(r)[cols.clone()].fill(0.0);
        }
    }
    Ok(FeatureTensor { layout: h.layout.clone(), values })
}

/// Zeroes individual columns; unlike block masks this can split a multiplet.
pub fn apply_component_mask(h: &FeatureTensor, keep_columns: &[bool]) -> Result<FeatureTensor> {
    if keep_columns.len() != h.layout.width() {
        return Err(Error::LayoutMismatch("component mask width".into()));
    }
    let mut values = h.values.clone();
    for r in 0..values.rows {
        for (v, &keep) in values.row_mut(r).iter_mut().zip(keep_columns) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(FeatureTensor { layout: h.layout.clone(), values })
}

/// Compacts `h` to the retained channels of `map`.
pub fn gather_features(h: &FeatureTensor, map: &ChannelMap) -> Result<FeatureTensor> {
    if !h.layout.same_shape(&map.source) {
        return Err(Error::LayoutMismatch(format!("features {} vs map source {}", h.layout, map.source)));
    }
    let cols = map.source_columns();
    Ok(FeatureTensor { layout: map.target_layout(), values: h.values.select_cols(&cols) })
}

/// Inverse of [`gather_features`]: places compacted channels back into the
/// source layout, dropped channels zero.
pub fn embed_features(h: &FeatureTensor, map: &ChannelMap) -> Result<FeatureTensor> {
    if !h.layout.same_shape(&map.target_layout()) {
        return Err(Error::LayoutMismatch(format!("features {} vs map target", h.layout)));
    }
    let cols = map.source_columns();
    let mut values = Mat::zeros(h.n_atoms(), map.source.width());
    for r in 0..values.rows {
        let src = h.values.row(r);
        let dst = values.row_mut(r);
        for (c, &to) in cols.iter().enumerate() {
            dst[to] = src[c];
        }
    }
    Ok(FeatureTensor { layout: map.source.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::random_rotation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(layout: &IrrepsLayout, n: usize, seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * layout.width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureTensor::new(layout.clone(), Mat::from_vec(n, layout.width(), data)).unwrap()
    }

    fn random_mask(layout: &IrrepsLayout, seed: u64) -> LayerMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = layout.mults().iter().map(|&n| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        LayerMask::from_bits(layout, bits).unwrap()
    }

    #[test]
    fn offsets_are_a_bijection() {
        let layout = IrrepsLayout::new(vec![3, 2, 0, 1]);
        assert_eq!(layout.width(), 3 + 6 + 7);
        let mut seen = vec![false; layout.width()];
        for (l, k) in layout.blocks() {
            for m in -(l as i64)..=l as i64 {
                let i = layout.index(k, l, m);
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
        assert_eq!(layout.offset(3), 9);
    }

    #[test]
    fn identity_and_zero_masks() {
        let layout = IrrepsLayout::new(vec![2, 2]);
        let h = random_features(&layout, 3, 1);
        assert_eq!(apply_block_mask(&h, &LayerMask::ones(&layout)).unwrap(), h);
        let z = apply_block_mask(&h, &LayerMask::zeros(&layout)).unwrap();
        assert!(z.values().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropping_one_vector_block_zeroes_three_columns() {
        let layout = IrrepsLayout::new(vec![2, 3]);
        let h = random_features(&layout, 4, 2);
        let mut z = LayerMask::ones(&layout);
        z.set(1, 1, false);
        let out = apply_block_mask(&h, &z).unwrap();
        let dropped: Vec<usize> = (-1..=1).map(|m| layout.index(1, 1, m)).collect();
        assert_eq!(dropped, vec![5, 6, 7]);
        for r in 0..4 {
            for c in 0..layout.width() {
                let want = if dropped.contains(&c) { 0.0 } else { h.values().get(r, c) };
                assert_eq!(out.values().get(r, c).to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let h = random_features(&IrrepsLayout::new(vec![2, 1]), 1, 3);
        assert!(apply_block_mask(&h, &LayerMask::ones(&IrrepsLayout::new(vec![2, 2]))).is_err());
    }

    #[test]
    fn slice_layout_examples() {
        let layout = IrrepsLayout::new(vec![4, 4]);
        let (same, map) = LayerMask::ones(&layout).slice_layout();
        assert_eq!(same, layout);
        assert!(map.is_identity());

        let mut drop_vectors = LayerMask::ones(&layout);
        for k in 0..4 {
            drop_vectors.set(k, 1, false);
        }
        assert_eq!(drop_vectors.slice_layout().0.mults(), &[4, 0]);

        let mut z = LayerMask::ones(&IrrepsLayout::scalars(4));
        z.set(1, 0, false);
        z.set(3, 0, false);
        let (small, map) = z.slice_layout();
        assert_eq!(small.mults(), &[2]);
        assert_eq!(map.get(0, 0), Some(0));
        assert_eq!(map.get(2, 0), Some(1));
        assert_eq!(map.get(1, 0), None);
    }

    #[test]
    fn gather_single_scalar_channel() {
        let layout = IrrepsLayout::new(vec![3, 1]);
        let h = random_features(&layout, 2, 4);
        let map = ChannelMap::from_kept(&layout, vec![vec![1], vec![]]).unwrap();
        let g = gather_features(&h, &map).unwrap();
        assert_eq!(g.values().shape(), (2, 1));
        for r in 0..2 {
            assert_eq!(g.values().get(r, 0), h.values().get(r, 1));
        }
        assert_eq!(gather_features(&h, &ChannelMap::identity(&layout)).unwrap(), h);
    }

    #[test]
    fn mask_text_round_trip() {
        let layouts = vec![IrrepsLayout::scalars(3), IrrepsLayout::new(vec![2, 2])];
        let mask = PruneMask::new(layouts.iter().enumerate().map(|(i, l)| random_mask(l, i as u64)).collect());
        let back = PruneMask::from_text(&mask.to_text(), &layouts).unwrap();
        assert_eq!(back, mask);
        let err = PruneMask::from_text("0 0 0 1\n0 0 9 1\n", &layouts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn element_wise_mask_breaks_equivariance() {
        let layout = IrrepsLayout::new(vec![0, 1]);
        let keep = [true, false, true];
        let mut violations = 0;
        for trial in 0..100 {
            let h = random_features(&layout, 1, 100 + trial);
            let g = random_rotation(trial);
            let a = apply_component_mask(&h, &keep).unwrap().rotate(&g);
            let b = apply_component_mask(&h.rotate(&g), &keep).unwrap();
            if a.values().max_abs_diff(b.values()) > 1e-3 {
                violations += 1;
            }
        }
        assert!(violations >= 99, "{violations}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn block_mask_commutes_with_rotation(
            mult in proptest::collection::vec(0usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let layout = IrrepsLayout::new(mult);
            let h = random_features(&layout, 3, seed);
            let z = random_mask(&layout, seed ^ 0x5555);
            let g = random_rotation(seed);
            let a = apply_block_mask(&h, &z).unwrap().rotate(&g);
            let b = apply_block_mask(&h.rotate(&g), &z).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn embed_after_gather_is_masking(
            mult in proptest::collection::vec(0usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let layout = IrrepsLayout::new(mult);
            let h = random_features(&layout, 2, seed);
            let z = random_mask(&layout, seed.wrapping_add(1));
            let (_, map) = z.slice_layout();
            let round = embed_features(&gather_features(&h, &map).unwrap(), &map).unwrap();
            prop_assert_eq!(round, apply_block_mask(&h, &z).unwrap());
        }

        #[test]
        fn sliced_width_plus_dropped_is_width(
            mult in proptest::collection::vec(0usize..6, 1..5),
            seed in any::<u64>(),
        ) {
            let layout = IrrepsLayout::new(mult);
            let z = random_mask(&layout, seed);
            let (small, _) = z.slice_layout();
            let dropped = z.column_factors().iter().filter(|&&f| f == 0.0).count();
            prop_assert_eq!(small.width() + dropped, layout.width());
        }
    }
}
