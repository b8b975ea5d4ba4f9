//! Problem reshaping and block selection.
//!
//! A block is formed by the trailing indices of the source tensor (the
//! *rows*, contiguous on load) and the trailing indices of the destination
//! tensor (the *columns*, contiguous on store). Each block index is padded to
//! a power of two inside the registers; memory is never padded.

use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::machine::MachineConfig;
use crate::tensor::{check_rank, PermutationMap, TensorLayout};

/// `2^ceil(log2 d)`.
pub fn pad_pow2(d: usize) -> usize {
    d.next_power_of_two()
}

pub fn log2_ceil(d: usize) -> usize {
    pad_pow2(d).trailing_zeros() as usize
}

/// Fraction of padded slots holding real elements when every extent is
/// padded to a power of two on its own.
pub fn padding_efficiency(extents: &[usize]) -> Ratio<u64> {
    let real: u64 = extents.iter().map(|&d| d as u64).product();
    let padded: u64 = extents.iter().map(|&d| pad_pow2(d) as u64).product();
    Ratio::new(real, padded)
}

/// Fuses adjacent source indices that stay adjacent and in order in the
/// destination. Size-1 dimensions are dropped. The element bijection is
/// unchanged.
pub fn merge_dimensions(layout: &TensorLayout, map: &PermutationMap) -> Result<(TensorLayout, PermutationMap)> {
    check_rank(layout, map)?;
    let dims = layout.dims();
    let keep: Vec<usize> = (0..dims.len()).filter(|&k| dims[k] > 1).collect();
    if keep.is_empty() {
        return Ok((
            TensorLayout::new(vec![1], layout.elem_width())?,
            PermutationMap::identity(1),
        ));
    }
    // squeeze size-1 dims: renumber the survivors densely
    let mut renum = vec![usize::MAX; dims.len()];
    for (new, &old) in keep.iter().enumerate() {
        renum[old] = new;
    }
    let sq_dims: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
    let sq_sigma: Vec<usize> = map
        .sigma()
        .iter()
        .filter(|&&s| renum[s] != usize::MAX)
        .map(|&s| renum[s])
        .collect();
    let n = sq_dims.len();
    let mut inv = vec![0; n];
    for (j, &s) in sq_sigma.iter().enumerate() {
        inv[s] = j;
    }

    let mut group_of = vec![0usize; n];
    let mut group_dims = Vec::new();
    for k in 0..n {
        if k > 0 && inv[k] == inv[k - 1] + 1 {
            group_of[k] = group_of[k - 1];
            *group_dims.last_mut().unwrap() *= sq_dims[k];
        } else {
            group_of[k] = group_dims.len();
            group_dims.push(sq_dims[k]);
        }
    }
    let mut sigma = Vec::with_capacity(group_dims.len());
    for &k in &sq_sigma {
        if k == 0 || group_of[k] != group_of[k - 1] {
            sigma.push(group_of[k]);
        }
    }
    Ok((
        TensorLayout::new(group_dims, layout.elem_width())?,
        PermutationMap::new(sigma)?,
    ))
}

/// Splits every power-of-two dimension into size-2 sub-indices, keeping the
/// sub-indices of one dimension in order.
pub fn decompose_pow2(layout: &TensorLayout, map: &PermutationMap) -> Result<(TensorLayout, PermutationMap)> {
    check_rank(layout, map)?;
    let dims = layout.dims();
    if let Some(&d) = dims.iter().find(|d| !d.is_power_of_two()) {
        return Err(Error::Planning(format!(
            "cannot decompose dimension of size {d}: not a power of two"
        )));
    }
    let bits: Vec<usize> = dims.iter().map(|d| d.trailing_zeros() as usize).collect();
    let total: usize = bits.iter().sum();
    if total == 0 {
        return Ok((TensorLayout::new(vec![1], layout.elem_width())?, PermutationMap::identity(1)));
    }
    let mut base = vec![0; dims.len()];
    for k in 1..dims.len() {
        base[k] = base[k - 1] + bits[k - 1];
    }
    let mut sigma = Vec::with_capacity(total);
    for &s in map.sigma() {
        sigma.extend((0..bits[s]).map(|t| base[s] + t));
    }
    Ok((
        TensorLayout::new(vec![2; total], layout.elem_width())?,
        PermutationMap::new(sigma)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FallbackMode {
    None,
    /// A trailing dimension exceeds the lane count and is covered by
    /// `w`-wide chunks, degenerating to tiled matrix transposition.
    MatrixTile,
}

/// One index taking part in the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIndex {
    /// Source dimension index in the planned layout.
    pub index: usize,
    /// Extent inside one block (`w` for chunked indices).
    pub extent: usize,
    /// `extent` rounded up to a power of two.
    pub padded: usize,
    pub chunked: bool,
}

impl BlockIndex {
    pub fn bits(&self) -> usize {
        self.padded.trailing_zeros() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DigitKind {
    /// A dimension outside the block.
    Outer,
    /// Chunk counter of a dimension wider than `w`.
    Chunk,
}

/// One position of the block counter. Values run over `lo..hi`; the offset of
/// value `v` is `v * step`, except that `last` (when present) replaces the
/// offset of value `hi - 1` (the final, overlapping chunk).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Digit {
    pub index: usize,
    pub kind: DigitKind,
    pub lo: usize,
    pub hi: usize,
    pub src_step: i64,
    pub dst_step: i64,
    pub last: Option<(i64, i64)>,
}

impl Digit {
    pub fn offset(&self, v: usize) -> (i64, i64) {
        match self.last {
            Some(last) if v + 1 == self.hi => last,
            _ => (v as i64 * self.src_step, v as i64 * self.dst_step),
        }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }
}

/// Mixed-radix block counter, innermost digit first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CounterSpec {
    pub digits: Vec<Digit>,
}

impl CounterSpec {
    pub fn trips(&self) -> usize {
        self.digits.iter().map(Digit::len).product()
    }

    /// Offsets of iteration `it`, by direct decode.
    pub fn offsets_at(&self, mut it: usize) -> (i64, i64) {
        let (mut s, mut d) = (0, 0);
        for dg in &self.digits {
            let v = dg.lo + it % dg.len();
            it /= dg.len();
            let (a, b) = dg.offset(v);
            s += a;
            d += b;
        }
        (s, d)
    }

    pub fn start(&self) -> Counter {
        let values: Vec<usize> = self.digits.iter().map(|d| d.lo).collect();
        let (mut src, mut dst) = (0, 0);
        for (dg, &v) in self.digits.iter().zip(&values) {
            let (a, b) = dg.offset(v);
            src += a;
            dst += b;
        }
        Counter { values, src, dst }
    }

    /// Per-digit increment deltas `(step, into_last, wrap)`; the increment of
    /// a counter is one comparison chain over these.
    pub fn deltas(&self) -> Vec<DigitDeltas> {
        self.digits
            .iter()
            .map(|dg| {
                let step = (dg.src_step, dg.dst_step);
                let into_last = if dg.len() >= 2 {
                    let a = dg.offset(dg.hi - 1);
                    let b = dg.offset(dg.hi - 2);
                    (a.0 - b.0, a.1 - b.1)
                } else {
                    step
                };
                let hi = dg.offset(dg.hi - 1);
                let lo = dg.offset(dg.lo);
                DigitDeltas {
                    step,
                    into_last,
                    wrap: (lo.0 - hi.0, lo.1 - hi.1),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DigitDeltas {
    pub step: (i64, i64),
    pub into_last: (i64, i64),
    pub wrap: (i64, i64),
}

/// Running state of a [`CounterSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counter {
    pub values: Vec<usize>,
    pub src: i64,
    pub dst: i64,
}

impl Counter {
    pub fn advance(&mut self, spec: &CounterSpec, deltas: &[DigitDeltas]) {
        for (i, dg) in spec.digits.iter().enumerate() {
            let v = self.values[i] + 1;
            if v < dg.hi {
                let d = if v + 1 == dg.hi { deltas[i].into_last } else { deltas[i].step };
                self.values[i] = v;
                self.src += d.0;
                self.dst += d.1;
                return;
            }
            self.values[i] = dg.lo;
            self.src += deltas[i].wrap.0;
            self.dst += deltas[i].wrap.1;
        }
    }
}

/// Chosen block and derived quantities for one (reshaped) permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub lanes: usize,
    pub layout: TensorLayout,
    pub map: PermutationMap,
    /// Trailing source indices, innermost first.
    pub row_indices: Vec<usize>,
    /// Trailing destination indices `sigma_0, sigma_1, ...`.
    pub col_indices: Vec<usize>,
    pub common_indices: Vec<usize>,
    /// Every block index in ascending source order.
    pub block: Vec<BlockIndex>,
    pub padded_row_extents: Vec<usize>,
    pub padded_col_extents: Vec<usize>,
    /// Virtual data registers of one block (`2^G`).
    pub num_registers: usize,
    pub shuffle_steps: usize,
    /// Real over padded block extents.
    pub utilization: Ratio<u64>,
    /// Real elements over lane slots of one block's register file.
    pub lane_occupancy: Ratio<u64>,
    /// Real elements over lane slots summed over all blocks (accounts for
    /// overlapping chunks).
    pub effective_utilization: Ratio<u64>,
    pub fallback_mode: FallbackMode,
    /// Block counter, innermost digit first.
    pub counter: CounterSpec,
    /// Length of one destination run (`prod` of column extents).
    pub dest_run: usize,
    /// Destination index following the column set, if any.
    pub next_dest_index: Option<usize>,
}

impl BlockPlan {
    pub fn block_index(&self, k: usize) -> Option<&BlockIndex> {
        self.block.iter().find(|b| b.index == k)
    }

    pub fn row_bits(&self) -> usize {
        self.row_indices.iter().map(|&k| self.block_index(k).unwrap().bits()).sum()
    }

    pub fn col_bits(&self) -> usize {
        self.col_indices.iter().map(|&k| self.block_index(k).unwrap().bits()).sum()
    }

    pub fn common_bits(&self) -> usize {
        self.common_indices.iter().map(|&k| self.block_index(k).unwrap().bits()).sum()
    }

    pub fn total_bits(&self) -> usize {
        self.block.iter().map(BlockIndex::bits).sum()
    }

    pub fn register_bits(&self) -> usize {
        self.num_registers.trailing_zeros() as usize
    }

    /// Real elements in one block.
    pub fn block_elements(&self) -> usize {
        self.block.iter().map(|b| b.extent).product()
    }

    pub fn num_blocks(&self) -> usize {
        self.counter.trips()
    }

    /// Destination stride of source index `k`.
    pub fn dst_stride_of(&self, k: usize) -> usize {
        let pos = self.map.inverse().sigma()[k];
        crate::tensor::permuted_layout(&self.layout, &self.map)
            .expect("plan layout and map agree")
            .strides()[pos]
    }

    pub fn src_stride_of(&self, k: usize) -> usize {
        self.layout.strides()[k]
    }
}

fn greedy(order: impl Iterator<Item = usize>, dims: &[usize], w: usize) -> (Vec<usize>, bool) {
    let mut order = order.peekable();
    let first = *order.peek().expect("rank >= 1");
    if dims[first] > w {
        return (vec![first], true);
    }
    let mut picked = Vec::new();
    let mut prod = 1;
    for k in order {
        let p = pad_pow2(dims[k]);
        if dims[k] > w || prod * p > w {
            break;
        }
        prod *= p;
        picked.push(k);
    }
    (picked, false)
}

/// Chooses the block for an already reshaped problem.
pub fn select_block(layout: &TensorLayout, map: &PermutationMap, machine: &MachineConfig) -> Result<BlockPlan> {
    check_rank(layout, map)?;
    if layout.rank() == 0 {
        return Err(Error::Planning("rank-0 tensor".into()));
    }
    if layout.elem_width() != machine.elem_width {
        return Err(Error::Inconsistent(format!(
            "layout element width {} differs from machine element width {}",
            layout.elem_width(),
            machine.elem_width
        )));
    }
    let w = machine.lanes();
    let dims = layout.dims();
    let n = dims.len();
    let sigma = map.sigma();

    let (row_indices, row_chunked) = greedy(0..n, dims, w);
    let (col_indices, col_chunked) = greedy(sigma.iter().copied(), dims, w);
    let chunked = |k: usize| (row_chunked && row_indices[0] == k) || (col_chunked && col_indices[0] == k);

    let mut in_block: Vec<usize> = row_indices.iter().chain(&col_indices).copied().collect();
    in_block.sort_unstable();
    in_block.dedup();
    let block: Vec<BlockIndex> = in_block
        .iter()
        .map(|&k| {
            let c = chunked(k);
            let extent = if c { w } else { dims[k] };
            BlockIndex {
                index: k,
                extent,
                padded: pad_pow2(extent),
                chunked: c,
            }
        })
        .collect();
    let bi = |k: usize| *block.iter().find(|b| b.index == k).unwrap();
    let common_indices: Vec<usize> = row_indices.iter().filter(|k| col_indices.contains(k)).copied().collect();

    let bits = |set: &[usize]| -> usize { set.iter().map(|&k| bi(k).bits()).sum() };
    let r = bits(&row_indices);
    let c = bits(&col_indices);
    let kb = bits(&common_indices);
    let t: usize = block.iter().map(BlockIndex::bits).sum();
    let g = (t - r).max(t - c);
    let num_registers = 1usize << g;
    let shuffle_steps = r.max(c) - kb;

    let real: u64 = block.iter().map(|b| b.extent as u64).product();
    let padded: u64 = block.iter().map(|b| b.padded as u64).product();
    let utilization = Ratio::new(real, padded);
    let lane_occupancy = Ratio::new(real, (w * num_registers) as u64);

    // destination strides per source index
    let inv = map.inverse();
    let dst_strides = crate::tensor::permuted_layout(layout, map)?.strides().to_vec();
    let dst_of = |k: usize| dst_strides[inv.sigma()[k]] as i64;
    let src_of = |k: usize| layout.strides()[k] as i64;

    let q1 = col_indices.len();
    let next_dest_index = sigma.get(q1).copied();
    let mut digits = Vec::new();
    let push_outer = |k: usize, digits: &mut Vec<Digit>| {
        digits.push(Digit {
            index: k,
            kind: DigitKind::Outer,
            lo: 0,
            hi: dims[k],
            src_step: src_of(k),
            dst_step: dst_of(k),
            last: None,
        })
    };
    if let Some(k) = next_dest_index {
        if !in_block.contains(&k) {
            push_outer(k, &mut digits);
        }
    }
    for b in block.iter().filter(|b| b.chunked) {
        let k = b.index;
        let chunks = dims[k].div_ceil(w);
        let start = (dims[k] - w) as i64;
        digits.push(Digit {
            index: k,
            kind: DigitKind::Chunk,
            lo: 0,
            hi: chunks,
            src_step: w as i64 * src_of(k),
            dst_step: w as i64 * dst_of(k),
            last: if dims[k] % w != 0 {
                Some((start * src_of(k), start * dst_of(k)))
            } else {
                None
            },
        });
    }
    for k in 0..n {
        if !in_block.contains(&k) && Some(k) != next_dest_index {
            push_outer(k, &mut digits);
        }
    }
    let counter = CounterSpec { digits };
    let slots = (counter.trips() * w * num_registers) as u64;
    let effective_utilization = Ratio::new(layout.num_elements() as u64, slots);

    let dest_run = col_indices.iter().map(|&k| bi(k).extent).product();
    Ok(BlockPlan {
        lanes: w,
        layout: layout.clone(),
        map: map.clone(),
        padded_row_extents: row_indices.iter().map(|&k| bi(k).padded).collect(),
        padded_col_extents: col_indices.iter().map(|&k| bi(k).padded).collect(),
        row_indices,
        col_indices,
        common_indices,
        block,
        num_registers,
        shuffle_steps,
        utilization,
        lane_occupancy,
        effective_utilization,
        fallback_mode: if row_chunked || col_chunked {
            FallbackMode::MatrixTile
        } else {
            FallbackMode::None
        },
        counter,
        dest_run,
        next_dest_index,
    })
}

/// Block base offsets `(source, destination)` in counter order.
pub fn enumerate_blocks(plan: &BlockPlan) -> BlockIter<'_> {
    BlockIter {
        spec: &plan.counter,
        deltas: plan.counter.deltas(),
        state: plan.counter.start(),
        remaining: plan.counter.trips(),
    }
}

pub struct BlockIter<'a> {
    spec: &'a CounterSpec,
    deltas: Vec<DigitDeltas>,
    state: Counter,
    remaining: usize,
}

impl Iterator for BlockIter<'_> {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = (self.state.src as usize, self.state.dst as usize);
        if self.remaining > 0 {
            self.state.advance(self.spec, &self.deltas);
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for BlockIter<'_> {}

/// Source and destination offsets of every real element inside one block,
/// relative to the block base, in block-index mixed-radix order.
pub fn intra_block_offsets(plan: &BlockPlan) -> Vec<(usize, usize)> {
    let mut out = vec![(0usize, 0usize)];
    for b in &plan.block {
        let ss = plan.src_stride_of(b.index);
        let ds = plan.dst_stride_of(b.index);
        out = (0..b.extent)
            .flat_map(|v| out.iter().map(move |&(s, d)| (s + v * ss, d + v * ds)))
            .collect();
    }
    out
}

impl fmt::Display for BlockPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        writeln!(f, "layout        {}", self.layout)?;
        writeln!(f, "map           {}", self.map)?;
        writeln!(f, "lanes         {}", self.lanes)?;
        writeln!(f, "rows          [{}] padded [{}]", list(&self.row_indices), list(&self.padded_row_extents))?;
        writeln!(f, "cols          [{}] padded [{}]", list(&self.col_indices), list(&self.padded_col_extents))?;
        writeln!(f, "common        [{}]", list(&self.common_indices))?;
        writeln!(f, "registers     {}", self.num_registers)?;
        writeln!(f, "shuffle_steps {}", self.shuffle_steps)?;
        writeln!(f, "utilization   {}", self.utilization)?;
        writeln!(f, "occupancy     {}", self.lane_occupancy)?;
        writeln!(f, "effective     {}", self.effective_utilization)?;
        writeln!(f, "blocks        {}", self.num_blocks())?;
        let mode = match self.fallback_mode {
            FallbackMode::None => "none",
            FallbackMode::MatrixTile => "matrix-tile",
        };
        write!(f, "fallback      {mode}")
    }
}
