//! In-register block transposition.
//!
//! A block is viewed as a tensor of bits. Every block index contributes
//! `log2(padded extent)` bits; each bit sits either in the lane number or in
//! the register number. Loading puts the row bits in the lanes, storing wants
//! the column bits there. Each butterfly step trades one lane bit for one
//! register bit: at step `k`, register `i` is shuffled with register
//! `i ^ 2^k`. A final intra-register lane permutation is folded into the
//! last step and the register order is fixed by renaming, which is free.
//!
//! Positions that carry no block bit are *dummy* bits; an element whose
//! dummy bit is set, or whose index value exceeds the real extent, is a
//! padding element. Padding is tracked statically and drives pruning.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::planner::{BlockIndex, BlockPlan, DigitKind, FallbackMode};

/// Per-lane selectors of a shuffle. Two-source selectors are in `[0, 2w)`
/// over `a ++ b`; self-shuffle selectors are in `[0, w)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShuffleIndexVector {
    pub id: u32,
    pub lanes: Vec<u32>,
}

impl ShuffleIndexVector {
    pub fn is_self_shuffle(&self) -> bool {
        let w = self.lanes.len() as u32;
        self.lanes.iter().all(|&s| s < w)
    }
}

/// Deduplicating constant pool of index vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstPool {
    entries: Vec<ShuffleIndexVector>,
    index: HashMap<Vec<u32>, u32>,
}

impl ConstPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, lanes: Vec<u32>) -> u32 {
        if let Some(&id) = self.index.get(&lanes) {
            return id;
        }
        let id = self.entries.len() as u32;
        self.index.insert(lanes.clone(), id);
        self.entries.push(ShuffleIndexVector { id, lanes });
        id
    }

    pub fn get(&self, id: u32) -> Option<&ShuffleIndexVector> {
        self.entries.get(id as usize)
    }

    pub fn entries(&self) -> &[ShuffleIndexVector] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: Vec<ShuffleIndexVector>) -> Result<Self> {
        let mut pool = ConstPool::new();
        for (i, e) in entries.into_iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Inconsistent(format!("constant id {} at position {i}", e.id)));
            }
            pool.index.entry(e.lanes.clone()).or_insert(e.id);
            pool.entries.push(e);
        }
        Ok(pool)
    }

    /// Text dump: one `const <id> w=<w> : <selectors>` line per entry.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format_const(e));
            s.push('\n');
        }
        s
    }
}

pub(crate) fn format_const(e: &ShuffleIndexVector) -> String {
    let sel: Vec<String> = e.lanes.iter().map(|x| x.to_string()).collect();
    format!("const {} w={} : {}", e.id, e.lanes.len(), sel.join(" "))
}

/// Fixed selectors for a butterfly step exchanging lane bit `lane_bit`:
/// returns the vector for the low output of a pair; the high output is
/// derived by [`partner_vector`].
pub fn fixed_swap_vector(lanes: usize, lane_bit: usize) -> Vec<u32> {
    let m = 1usize << lane_bit;
    (0..lanes)
        .map(|j| {
            let u = (j >> lane_bit) & 1;
            (u * lanes + (j & !m)) as u32
        })
        .collect()
}

/// High-output vector of a pair from its low-output vector: every selector
/// keeps its source operand and flips lane bit `lane_bit`.
pub fn partner_vector(low: &[u32], lane_bit: usize) -> Vec<u32> {
    low.iter().map(|&s| s ^ (1u32 << lane_bit)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Bit `bit` of block index `index`.
    Bit { index: usize, bit: usize },
    Dummy,
}

/// Where each block bit lives, before and after the local permutation.
#[derive(Clone, Debug)]
pub struct LaneModel {
    pub lanes: usize,
    pub lane_bits: usize,
    pub reg_bits: usize,
    pub src_lane: Vec<Label>,
    pub src_reg: Vec<Label>,
    pub dst_lane: Vec<Label>,
    pub dst_reg: Vec<Label>,
    /// Lane positions evicted by steps `0, 1, ...`.
    pub evict: Vec<usize>,
    pub block: Vec<BlockIndex>,
    pub src_strides: Vec<usize>,
    pub dst_strides: Vec<usize>,
    pub row_indices: Vec<usize>,
    pub col_indices: Vec<usize>,
}

fn bits_of(block: &[BlockIndex], k: usize) -> usize {
    block.iter().find(|b| b.index == k).unwrap().bits()
}

fn labels_for(block: &[BlockIndex], indices: &[usize]) -> Vec<Label> {
    indices
        .iter()
        .flat_map(|&k| (0..bits_of(block, k)).map(move |bit| Label::Bit { index: k, bit }))
        .collect()
}

fn fill_dummies(mut v: Vec<Label>, len: usize) -> Vec<Label> {
    v.resize(len, Label::Dummy);
    v
}

impl LaneModel {
    pub fn new(plan: &BlockPlan) -> LaneModel {
        let w = plan.lanes;
        let l_bits = w.trailing_zeros() as usize;
        let g = plan.register_bits();
        let block = plan.block.clone();
        let common = &plan.common_indices;
        let c_only: Vec<usize> = plan.col_indices.iter().filter(|k| !common.contains(k)).copied().collect();
        let inv = plan.map.inverse();
        let mut r_only: Vec<usize> = plan.row_indices.iter().filter(|k| !common.contains(k)).copied().collect();
        r_only.sort_by_key(|&k| inv.sigma()[k]);

        let src_lane = fill_dummies(labels_for(&block, &plan.row_indices), l_bits);
        let dst_lane = fill_dummies(labels_for(&block, &plan.col_indices), l_bits);

        let dst_set: Vec<Label> = dst_lane.clone();
        let dst_dummies = dst_set.iter().filter(|l| **l == Label::Dummy).count();
        let mut evict = Vec::new();
        let mut kept_dummies = 0;
        for (p, lab) in src_lane.iter().enumerate() {
            match lab {
                Label::Dummy => {
                    if kept_dummies < dst_dummies {
                        kept_dummies += 1;
                    } else {
                        evict.push(p);
                    }
                }
                bit => {
                    if !dst_set.contains(bit) {
                        evict.push(p);
                    }
                }
            }
        }
        let src_dummies = src_lane.len() - plan.row_bits();
        let needed_dummies = dst_dummies.saturating_sub(src_dummies);
        let mut src_reg = labels_for(&block, &c_only);
        src_reg.extend(std::iter::repeat(Label::Dummy).take(needed_dummies));
        let src_reg = fill_dummies(src_reg, g);
        debug_assert_eq!(evict.len(), plan.shuffle_steps);

        let dst_reg = fill_dummies(labels_for(&block, &r_only), g);

        LaneModel {
            lanes: w,
            lane_bits: l_bits,
            reg_bits: g,
            src_lane,
            src_reg,
            dst_lane,
            dst_reg,
            evict,
            src_strides: block.iter().map(|b| plan.src_stride_of(b.index)).collect(),
            dst_strides: block.iter().map(|b| plan.dst_stride_of(b.index)).collect(),
            block,
            row_indices: plan.row_indices.clone(),
            col_indices: plan.col_indices.clone(),
        }
    }

    fn slot(&self, k: usize) -> usize {
        self.block.iter().position(|b| b.index == k).unwrap()
    }

    /// Block-relative source offset of the element at `(reg, lane)` under the
    /// given arrangement, or `None` for padding.
    pub fn element(&self, reg_labels: &[Label], lane_labels: &[Label], reg: usize, lane: usize) -> Option<usize> {
        let mut vals = vec![0usize; self.block.len()];
        let mut apply = |labels: &[Label], x: usize| -> bool {
            for (p, lab) in labels.iter().enumerate() {
                let bit = (x >> p) & 1;
                match lab {
                    Label::Dummy => {
                        if bit == 1 {
                            return false;
                        }
                    }
                    Label::Bit { index, bit: b } => vals[self.slot(*index)] |= bit << b,
                }
            }
            true
        };
        if !apply(reg_labels, reg) || !apply(lane_labels, lane) {
            return None;
        }
        let mut off = 0;
        for (i, b) in self.block.iter().enumerate() {
            if vals[i] >= b.extent {
                return None;
            }
            off += vals[i] * self.src_strides[i];
        }
        Some(off)
    }

    fn decode_true(&self, indices: &[usize], mut x: usize) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for &k in indices {
            let e = self.block[self.slot(k)].extent;
            out.push((k, x % e));
            x /= e;
        }
        (x == 0).then_some(out)
    }

    fn encode_padded(&self, digits: &[(usize, usize)]) -> usize {
        let mut x = 0;
        let mut shift = 0;
        for &(k, v) in digits {
            x |= v << shift;
            shift += self.block[self.slot(k)].bits();
        }
        x
    }

    fn decode_padded(&self, indices: &[usize], x: usize) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut shift = 0;
        for &k in indices {
            let b = &self.block[self.slot(k)];
            let v = (x >> shift) & (b.padded - 1);
            if v >= b.extent {
                return None;
            }
            out.push((k, v));
            shift += b.bits();
        }
        if x >> shift != 0 {
            return None;
        }
        Some(out)
    }

    /// Raw contiguous length of one loaded row run.
    pub fn row_run(&self) -> usize {
        self.row_indices.iter().map(|&k| self.block[self.slot(k)].extent).product()
    }

    pub fn dest_run(&self) -> usize {
        self.col_indices.iter().map(|&k| self.block[self.slot(k)].extent).product()
    }

    /// Padded lane `x` to contiguous lane after a load.
    pub fn spread_table(&self) -> Vec<u32> {
        (0..self.lanes)
            .map(|x| match self.decode_padded(&self.row_indices, x) {
                Some(d) => {
                    let mut pos = 0;
                    let mut mul = 1;
                    for (k, v) in d {
                        pos += v * mul;
                        mul *= self.block[self.slot(k)].extent;
                    }
                    pos as u32
                }
                None => x as u32,
            })
            .collect()
    }

    /// Contiguous lane `y` to padded lane before a store.
    pub fn gather_table(&self) -> Vec<u32> {
        (0..self.lanes)
            .map(|y| match self.decode_true(&self.col_indices, y) {
                Some(d) => self.encode_padded(&d) as u32,
                None => y as u32,
            })
            .collect()
    }

    /// Expected block-relative source offset for lane `y` of destination
    /// register `t` (target numbering), or `None` past the run.
    pub fn expected_store_lane(&self, t: usize, y: usize) -> Option<usize> {
        let c = self.decode_true(&self.col_indices, y)?;
        let mut vals = vec![0usize; self.block.len()];
        for (k, v) in c {
            vals[self.slot(k)] = v;
        }
        for (p, lab) in self.dst_reg.iter().enumerate() {
            let bit = (t >> p) & 1;
            match lab {
                Label::Dummy if bit == 1 => return None,
                Label::Dummy => {}
                Label::Bit { index, bit: b } => vals[self.slot(*index)] |= bit << b,
            }
        }
        let mut off = 0;
        for (i, b) in self.block.iter().enumerate() {
            if vals[i] >= b.extent {
                return None;
            }
            off += vals[i] * self.src_strides[i];
        }
        Some(off)
    }

    /// Digit values of register `reg` under `labels`, or `None` when it holds
    /// no real element.
    fn register_digits(&self, labels: &[Label], reg: usize) -> Option<Vec<usize>> {
        let mut vals = vec![0usize; self.block.len()];
        for (p, lab) in labels.iter().enumerate() {
            let bit = (reg >> p) & 1;
            match lab {
                Label::Dummy if bit == 1 => return None,
                Label::Dummy => {}
                Label::Bit { index, bit: b } => vals[self.slot(*index)] |= bit << b,
            }
        }
        // only digits fully owned by the register can be range checked
        for (i, b) in self.block.iter().enumerate() {
            let owned = (0..b.bits()).all(|bit| labels.contains(&Label::Bit { index: b.index, bit }));
            if owned && vals[i] >= b.extent {
                return None;
            }
        }
        Some(vals)
    }
}

/// Status of one output register of one step after pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Regular two-source shuffle.
    Shuffle,
    /// Only one operand contributes real elements.
    SelfShuffle { operand: usize },
    /// No real element reaches this register.
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleStep {
    /// Step number `k`; register `i` pairs with `i ^ 2^k`.
    pub step: usize,
    pub lane_bit: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Logical vectors for the low and high output of every pair.
    pub vectors: (u32, u32),
    /// Per register output status, indexed by register number.
    pub outputs: Vec<OutputKind>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleSchedule {
    pub lanes: usize,
    pub steps: Vec<ShuffleStep>,
    /// Final lane permutation: output lane `j` takes lane `lane_perm[j]`.
    pub lane_perm: Vec<usize>,
    /// Virtual register number to store order number.
    pub renames: Vec<usize>,
    pub pruned: BTreeSet<(usize, usize)>,
    pub aux_self_shuffles: BTreeSet<(usize, usize)>,
    /// Registers that exist after loading.
    pub loaded: Vec<bool>,
}

impl ShuffleSchedule {
    pub fn num_registers(&self) -> usize {
        self.loaded.len()
    }
}

fn arrangement_after(model: &LaneModel, steps: usize) -> (Vec<Label>, Vec<Label>) {
    let mut lane = model.src_lane.clone();
    let mut reg = model.src_reg.clone();
    for (s, &l) in model.evict.iter().take(steps).enumerate() {
        std::mem::swap(&mut lane[l], &mut reg[s]);
    }
    (lane, reg)
}

/// Position mapping from `target` labels into `current` labels; dummies are
/// matched in order.
fn match_positions(target: &[Label], current: &[Label]) -> Vec<usize> {
    let mut used = vec![false; current.len()];
    target
        .iter()
        .map(|lab| {
            let p = current
                .iter()
                .enumerate()
                .position(|(i, c)| !used[i] && c == lab)
                .expect("label multisets agree");
            used[p] = true;
            p
        })
        .collect()
}

fn permute_bits(x: usize, map: &[usize]) -> usize {
    map.iter().enumerate().fold(0, |acc, (p, &q)| acc | (((x >> p) & 1) << q))
}

/// Butterfly exchange schedule for a block, with logical (padded-domain)
/// step vectors interned into `pool`.
pub fn butterfly_schedule(plan: &BlockPlan, pool: &mut ConstPool) -> ShuffleSchedule {
    let model = LaneModel::new(plan);
    let w = plan.lanes;
    let regs = plan.num_registers;
    let s_total = model.evict.len();
    let (final_lane, _) = arrangement_after(&model, s_total);
    let pos = match_positions(&model.dst_lane, &final_lane);
    let lane_perm: Vec<usize> = (0..w).map(|j| permute_bits(j, &pos)).collect();

    let steps = model
        .evict
        .iter()
        .enumerate()
        .map(|(s, &l)| {
            let mut low = fixed_swap_vector(w, l);
            if s + 1 == s_total {
                low = compose_post(&low, &lane_perm);
            }
            let high = partner_vector(&low, l);
            let pairs = (0..regs).filter(|i| i & (1 << s) == 0).map(|i| (i, i | (1 << s))).collect();
            ShuffleStep {
                step: s,
                lane_bit: l,
                pairs,
                vectors: (pool.intern(low), pool.intern(high)),
                outputs: vec![OutputKind::Shuffle; regs],
            }
        })
        .collect();

    let loaded = (0..regs).map(|v| model.register_digits(&model.src_reg, v).is_some()).collect();
    ShuffleSchedule {
        lanes: w,
        steps,
        lane_perm,
        renames: (0..regs).collect(),
        pruned: BTreeSet::new(),
        aux_self_shuffles: BTreeSet::new(),
        loaded,
    }
}

/// `out[j] = v[post[j]]`.
pub fn compose_post(v: &[u32], post: &[usize]) -> Vec<u32> {
    post.iter().map(|&p| v[p]).collect()
}

/// Applies `pre` to the lane part of every selector.
pub fn compose_pre(v: &[u32], pre: &[u32]) -> Vec<u32> {
    let w = v.len() as u32;
    v.iter().map(|&s| (s / w) * w + pre[(s % w) as usize]).collect()
}

/// Shuffle index vectors of the block: for every step its low and high
/// vector (high derived by symmetry). Steps before the last one use the
/// fixed swap vectors; the last one is composite.
pub fn gen_shuffle_indices(plan: &BlockPlan, pool: &mut ConstPool) -> Vec<ShuffleIndexVector> {
    let sched = butterfly_schedule(plan, pool);
    sched
        .steps
        .iter()
        .flat_map(|s| [s.vectors.0, s.vectors.1])
        .map(|id| pool.get(id).unwrap().clone())
        .collect()
}

/// Folds the final register order into register numbering.
pub fn apply_register_rename(mut schedule: ShuffleSchedule, plan: &BlockPlan) -> ShuffleSchedule {
    let model = LaneModel::new(plan);
    let (_, final_reg) = arrangement_after(&model, model.evict.len());
    // position q in final_reg carries the label found at target position pos[q]
    let pos = match_positions(&final_reg, &model.dst_reg);
    schedule.renames = (0..plan.num_registers).map(|v| permute_bits(v, &pos)).collect();
    schedule
}

/// Lane validity of every register through the schedule; `None` marks a
/// register that holds no real element.
fn validity_trace(model: &LaneModel, schedule: &ShuffleSchedule) -> Vec<Vec<Option<Vec<bool>>>> {
    let w = model.lanes;
    let regs = schedule.num_registers();
    let mut lane_labels = model.src_lane.clone();
    let mut reg_labels = model.src_reg.clone();
    let masks = |ll: &[Label], rl: &[Label]| -> Vec<Option<Vec<bool>>> {
        (0..regs)
            .map(|v| {
                let m: Vec<bool> = (0..w).map(|x| model.element(rl, ll, v, x).is_some()).collect();
                m.iter().any(|&b| b).then_some(m)
            })
            .collect()
    };
    let mut out = vec![masks(&lane_labels, &reg_labels)];
    for (s, &l) in model.evict.iter().enumerate() {
        std::mem::swap(&mut lane_labels[l], &mut reg_labels[s]);
        out.push(masks(&lane_labels, &reg_labels));
    }
    out
}

/// Drops shuffles producing only padding and turns shuffles whose real
/// output comes from a single operand into self-shuffles of that operand.
pub fn prune_padded(mut schedule: ShuffleSchedule, plan: &BlockPlan, pool: &ConstPool) -> ShuffleSchedule {
    let model = LaneModel::new(plan);
    let trace = validity_trace(&model, &schedule);
    let w = schedule.lanes;
    let n_steps = schedule.steps.len();
    let perm = schedule.lane_perm.clone();
    for s in 0..n_steps {
        let before = &trace[s];
        let after = &trace[s + 1];
        let step = &mut schedule.steps[s];
        for &(lo, hi) in &step.pairs.clone() {
            for (reg, vec_id) in [(lo, step.vectors.0), (hi, step.vectors.1)] {
                let Some(mask) = &after[reg] else {
                    step.outputs[reg] = OutputKind::Pruned;
                    schedule.pruned.insert((s, reg));
                    continue;
                };
                let sel = &pool.get(vec_id).unwrap().lanes;
                let last = s + 1 == n_steps;
                // the last vector already carries the final lane permutation
                let valid = |j: usize| if last { mask[perm[j]] } else { mask[j] };
                let mut uses = [false, false];
                for j in (0..w).filter(|&j| valid(j)) {
                    let src = (sel[j] as usize) / w;
                    uses[src] = true;
                    debug_assert!(before[[lo, hi][src]].is_some());
                }
                if !(uses[0] && uses[1]) {
                    let operand = if uses[0] { lo } else { hi };
                    step.outputs[reg] = OutputKind::SelfShuffle { operand };
                    schedule.aux_self_shuffles.insert((s, reg));
                }
            }
        }
    }
    schedule
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadRecord {
    /// Source register number.
    pub register: usize,
    /// Element offset relative to the block base.
    pub offset: usize,
    pub aligned: bool,
    pub spread: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreRecord {
    /// Destination register number (store order numbering).
    pub register: usize,
    pub offset: usize,
    pub aligned: bool,
    pub gather: Option<u32>,
    /// Store must preserve the lanes past the run (reserve and reorganize).
    pub tail_safe: bool,
    pub valid_lanes: usize,
}

/// Split of the innermost counter digit: iterations at or past `split_at`
/// store with the tail-safe sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TailSplit {
    pub digit: usize,
    pub split_at: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoPlan {
    pub loads: Vec<LoadRecord>,
    /// Stores in ascending destination order.
    pub stores: Vec<StoreRecord>,
    pub row_run: usize,
    pub dest_run: usize,
    pub tail_split: Option<TailSplit>,
    /// Digit of the destination index following the next one. Overhang
    /// past the end of the next index lands in later blocks while this
    /// digit stays below `split_at`.
    pub carry_split: Option<TailSplit>,
    /// Chunk digit of a chunked next index: overhang leaving the block lands
    /// in the following chunk except in the final one.
    pub chunk_tail: Option<usize>,
    /// Reorganization vector of tail-safe stores.
    pub blend: Option<u32>,
}

fn is_identity_on(table: &[u32], valid: impl Fn(usize) -> bool) -> bool {
    table.iter().enumerate().all(|(j, &s)| !valid(j) || s as usize == j)
}

/// Load and store records of one block.
pub fn plan_io(plan: &BlockPlan, pool: &mut ConstPool) -> Result<IoPlan> {
    let model = LaneModel::new(plan);
    let w = plan.lanes;
    let row_run = model.row_run();
    let dest_run = model.dest_run();
    if row_run > w || dest_run > w || dest_run == 0 {
        return Err(Error::Planning(format!(
            "row run {row_run} / destination run {dest_run} do not fit {w} lanes"
        )));
    }
    let src_aligned_base = plan
        .counter
        .digits
        .iter()
        .all(|d| d.src_step % w as i64 == 0 && d.last.map_or(true, |l| l.0 % w as i64 == 0));
    let dst_aligned_base = plan
        .counter
        .digits
        .iter()
        .all(|d| d.dst_step % w as i64 == 0 && d.last.map_or(true, |l| l.1 % w as i64 == 0));

    let spread = model.spread_table();
    let spread_id = (!is_identity_on(&spread, |x| model.decode_padded(&model.row_indices, x).is_some()))
        .then(|| pool.intern(spread));
    let gather = model.gather_table();
    let gather_id = (!is_identity_on(&gather, |y| y < dest_run)).then(|| pool.intern(gather));

    let slot = |k: usize| model.block.iter().position(|b| b.index == k).unwrap();
    let mut loads = Vec::new();
    for v in 0..plan.num_registers {
        let Some(vals) = model.register_digits(&model.src_reg, v) else { continue };
        let offset: usize = vals.iter().zip(&model.src_strides).map(|(a, s)| a * s).sum();
        loads.push(LoadRecord {
            register: v,
            offset,
            aligned: src_aligned_base && offset % w == 0 && row_run == w,
            spread: spread_id,
        });
    }

    let next = plan.next_dest_index;
    let next_in_block = next.filter(|k| plan.block_index(*k).is_some());
    let mut stores = Vec::new();
    for t in 0..plan.num_registers {
        let Some(vals) = model.register_digits(&model.dst_reg, t) else { continue };
        let offset: usize = vals.iter().zip(&model.dst_strides).map(|(a, s)| a * s).sum();
        let tail_safe = dest_run < w
            && match (next, next_in_block) {
                (None, _) => true,
                (Some(_), Some(k)) => {
                    let e = plan.block[slot(k)].extent;
                    vals[slot(k)] * dest_run + w > e * dest_run
                }
                (Some(_), None) => false,
            };
        stores.push(StoreRecord {
            register: t,
            offset,
            aligned: dst_aligned_base && offset % w == 0 && dest_run == w,
            gather: gather_id,
            tail_safe,
            valid_lanes: dest_run,
        });
    }
    stores.sort_by_key(|s| s.offset);

    let tail_split = match next {
        Some(k) if next_in_block.is_none() && dest_run < w => {
            let digit = plan
                .counter
                .digits
                .iter()
                .position(|d| d.index == k && d.kind == DigitKind::Outer)
                .ok_or_else(|| Error::Planning("next destination index has no counter digit".into()))?;
            let d = plan.layout.dims()[k];
            let safe = if d * dest_run >= w { (d * dest_run - w) / dest_run + 1 } else { 0 };
            Some(TailSplit { digit, split_at: safe })
        }
        _ => None,
    };

    // overhang past the next index spills into the following super-run
    let inv = plan.map.inverse();
    let after = |k: usize| plan.map.sigma().get(inv.sigma()[k] + 1).copied();
    let outer_digit = |k: usize| {
        plan.counter
            .digits
            .iter()
            .position(|d| d.index == k && d.kind == DigitKind::Outer)
    };
    let run_extent = match (next, next_in_block) {
        (Some(k), None) => Some((k, plan.layout.dims()[k])),
        (Some(k), Some(_)) if !plan.block[slot(k)].chunked => Some((k, plan.block[slot(k)].extent)),
        _ => None,
    };
    let carry_split = match run_extent {
        Some((k, e)) if dest_run < w => after(k).and_then(|k2| {
            let digit = outer_digit(k2)?;
            // the spill must land in a block visited later
            if outer_digit(k).is_some_and(|d1| d1 > digit) {
                return None;
            }
            let d2 = plan.layout.dims()[k2] as i64;
            let (sr, l, wl) = ((e * dest_run) as i64, dest_run as i64, w as i64);
            // safe while v*sr + sr - l + w <= d2*sr
            let num = d2 * sr - sr + l - wl;
            let split_at = if num < 0 { 0 } else { (num / sr + 1).min(d2) as usize };
            (split_at > 0).then_some(TailSplit { digit, split_at })
        }),
        _ => None,
    };
    let chunk_tail = match (next, next_in_block) {
        (Some(k), Some(_)) if plan.block[slot(k)].chunked && dest_run < w => plan
            .counter
            .digits
            .iter()
            .position(|d| d.index == k && d.kind == DigitKind::Chunk && d.len() >= 2)
            .filter(|&c| {
                // overhang of the penultimate chunk must stay inside the index
                let dg = &plan.counter.digits[c];
                let e = plan.block[slot(k)].extent;
                (dg.hi - 1) * e * dest_run + w <= plan.layout.dims()[k] * dest_run + dest_run
            }),
        _ => None,
    };
    let needs_blend = dest_run < w && (tail_split.is_some() || stores.iter().any(|s| s.tail_safe));
    let blend = needs_blend.then(|| {
        pool.intern(
            (0..w)
                .map(|j| if j < dest_run { j as u32 } else { (w + j) as u32 })
                .collect(),
        )
    });
    Ok(IoPlan {
        loads,
        stores,
        row_run,
        dest_run,
        tail_split,
        carry_split,
        chunk_tail,
        blend,
    })
}

/// One operation of the per-block program on SSA values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MicroOp {
    /// Load `w` source elements at block offset `offset`.
    Load { dst: usize, offset: usize, aligned: bool },
    Shuf { a: usize, b: usize, table: u32, dst: usize },
    SelfShuf { src: usize, table: u32, dst: usize },
    Store { src: usize, store: usize },
}

/// Lane-exact program for one block.
#[derive(Clone, Debug)]
pub struct BlockKernel {
    pub lanes: usize,
    pub ops: Vec<MicroOp>,
    pub num_values: usize,
    pub io: IoPlan,
    pub schedule: ShuffleSchedule,
}

impl BlockKernel {
    pub fn count(&self, pred: impl Fn(&MicroOp) -> bool) -> usize {
        self.ops.iter().filter(|o| pred(o)).count()
    }
}

/// Content of a value during symbolic execution: per lane, the
/// block-relative source offset of a real element.
type Lanes = Vec<Option<usize>>;

fn run_selectors(sel: &[u32], a: &Lanes, b: Option<&Lanes>) -> Lanes {
    let w = a.len();
    sel.iter()
        .map(|&s| {
            let s = s as usize;
            if s < w {
                a[s]
            } else {
                b.and_then(|b| b[s - w])
            }
        })
        .collect()
}

/// Assembles the lane-exact block program: loads, the pruned butterfly with
/// spread and gather folded into the first and last step, and stores. The
/// routing is checked by symbolic execution before returning.
pub fn assemble_block(plan: &BlockPlan, pool: &mut ConstPool) -> Result<BlockKernel> {
    if plan.lanes < 2 {
        return Err(Error::Planning("lane count below 2".into()));
    }
    let model = LaneModel::new(plan);
    let w = plan.lanes;
    let schedule = butterfly_schedule(plan, pool);
    let schedule = apply_register_rename(schedule, plan);
    let schedule = prune_padded(schedule, plan, pool);
    let io = plan_io(plan, pool)?;
    let spread = model.spread_table();
    let gather: Vec<usize> = model.gather_table().iter().map(|&x| x as usize).collect();

    let mut ops = Vec::new();
    let mut next_value = 0usize;
    let mut fresh = || {
        next_value += 1;
        next_value - 1
    };
    // current SSA value and symbolic content per register number
    let regs = plan.num_registers;
    let mut cur: Vec<Option<(usize, Lanes)>> = vec![None; regs];
    for rec in &io.loads {
        let v = fresh();
        ops.push(MicroOp::Load {
            dst: v,
            offset: rec.offset,
            aligned: rec.aligned,
        });
        let lanes: Lanes = (0..w)
            .map(|x| {
                // raw contiguous lane x is row element x of this register
                let d = model.decode_true(&model.row_indices, x)?;
                let px = model.encode_padded(&d);
                model.element(&model.src_reg, &model.src_lane, rec.register, px)
            })
            .collect();
        cur[rec.register] = Some((v, lanes));
    }

    let s_total = schedule.steps.len();
    let emit_self = |ops: &mut Vec<MicroOp>, src: &(usize, Lanes), table: Vec<u32>, pool: &mut ConstPool, v: usize| -> Option<(usize, Lanes)> {
        let out = run_selectors(&table, &src.1, None);
        if is_identity_on(&table, |j| out[j].is_some()) {
            return Some((src.0, src.1.clone()));
        }
        let id = pool.intern(table);
        ops.push(MicroOp::SelfShuf { src: src.0, table: id, dst: v });
        Some((v, out))
    };

    if s_total == 0 {
        // one composite self-shuffle: spread, lane reorder, gather
        let perm = &schedule.lane_perm;
        let table: Vec<u32> = (0..w).map(|y| spread[perm[gather[y]]]).collect();
        for reg in 0..regs {
            if let Some(src) = cur[reg].take() {
                let v = fresh();
                cur[reg] = emit_self(&mut ops, &src, table.clone(), pool, v);
            }
        }
    }
    for (s, step) in schedule.steps.iter().enumerate() {
        let mut next: Vec<Option<(usize, Lanes)>> = vec![None; regs];
        for &(lo, hi) in &step.pairs {
            for (reg, vid) in [(lo, step.vectors.0), (hi, step.vectors.1)] {
                let mut table = pool.get(vid).unwrap().lanes.clone();
                if s + 1 == s_total {
                    table = compose_post(&table, &gather);
                }
                if s == 0 {
                    table = compose_pre(&table, &spread);
                }
                match step.outputs[reg] {
                    OutputKind::Pruned => {}
                    OutputKind::Shuffle => {
                        let (a, b) = (cur[lo].as_ref(), cur[hi].as_ref());
                        let (Some(a), Some(b)) = (a, b) else {
                            return Err(Error::Planning(format!("step {s}: missing operand for register {reg}")));
                        };
                        let out = run_selectors(&table, &a.1, Some(&b.1));
                        let v = fresh();
                        let id = pool.intern(table);
                        ops.push(MicroOp::Shuf { a: a.0, b: b.0, table: id, dst: v });
                        next[reg] = Some((v, out));
                    }
                    OutputKind::SelfShuffle { operand } => {
                        let src = cur[operand]
                            .as_ref()
                            .ok_or_else(|| Error::Planning(format!("step {s}: missing operand {operand}")))?;
                        let off = if operand == hi { w as u32 } else { 0 };
                        let self_table: Vec<u32> = table.iter().map(|&x| x.wrapping_sub(off) % w as u32).collect();
                        // lanes taken from the absent operand carry padding only
                        let v = fresh();
                        next[reg] = emit_self(&mut ops, src, self_table, pool, v);
                    }
                }
            }
        }
        cur = next;
    }

    // stores, checked against the expected destination runs
    let mut by_target = vec![None; regs];
    for (v, &t) in schedule.renames.iter().enumerate() {
        by_target[t] = Some(v);
    }
    for (i, rec) in io.stores.iter().enumerate() {
        let v = by_target[rec.register].unwrap();
        let Some((value, lanes)) = &cur[v] else {
            return Err(Error::Planning(format!("destination register {} never produced", rec.register)));
        };
        for y in 0..rec.valid_lanes {
            let want = model.expected_store_lane(rec.register, y);
            if lanes[y] != want {
                return Err(Error::Planning(format!(
                    "routing mismatch in register {} lane {y}: got {:?}, want {want:?}",
                    rec.register, lanes[y]
                )));
            }
        }
        ops.push(MicroOp::Store { src: *value, store: i });
    }
    if plan.fallback_mode == FallbackMode::None && io.stores.len() * io.dest_run != plan.block_elements() {
        return Err(Error::Planning("stores do not cover the block".into()));
    }
    Ok(BlockKernel {
        lanes: w,
        ops,
        num_values: next_value,
        io,
        schedule,
    })
}

impl fmt::Display for ShuffleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(
                f,
                "step {} lane_bit {} pairs {} vectors ({}, {}) pruned {} self {}",
                s.step,
                s.lane_bit,
                s.pairs.len(),
                s.vectors.0,
                s.vectors.1,
                s.outputs.iter().filter(|o| **o == OutputKind::Pruned).count(),
                s.outputs.iter().filter(|o| matches!(o, OutputKind::SelfShuffle { .. })).count(),
            )?;
        }
        write!(f, "renames {:?}", self.renames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;
    use crate::planner::select_block;
    use crate::tensor::{PermutationMap, TensorLayout};
    use proptest::prelude::*;

    fn plan(dims: Vec<usize>, sigma: Vec<usize>, lanes: usize) -> BlockPlan {
        let l = TensorLayout::new(dims, 4).unwrap();
        let m = PermutationMap::new(sigma).unwrap();
        select_block(&l, &m, &MachineConfig::with_lanes(lanes, 4).unwrap()).unwrap()
    }

    /// Brute-force oracle: simulate a kernel's ops on sentinel values and
    /// compare every stored lane with the intra-block permutation.
    fn check_routing(p: &BlockPlan, k: &BlockKernel) {
        let w = p.lanes;
        let mut vals: HashMap<usize, Vec<Option<usize>>> = HashMap::new();
        let mut pool = ConstPool::new();
        let kk = assemble_block(p, &mut pool).unwrap();
        assert_eq!(kk.ops, k.ops);
        for op in &k.ops {
            match *op {
                MicroOp::Load { dst, offset, .. } => {
                    let lanes = (0..w)
                        .map(|x| (x < k.io.row_run).then_some(offset + x))
                        .collect();
                    vals.insert(dst, lanes);
                }
                MicroOp::Shuf { a, b, table, dst } => {
                    let t = &pool.get(table).unwrap().lanes;
                    let out = run_selectors(t, &vals[&a], Some(&vals[&b]));
                    vals.insert(dst, out);
                }
                MicroOp::SelfShuf { src, table, dst } => {
                    let t = &pool.get(table).unwrap().lanes;
                    assert!(t.iter().all(|&s| (s as usize) < w));
                    let out = run_selectors(t, &vals[&src], None);
                    vals.insert(dst, out);
                }
                MicroOp::Store { src, store } => {
                    let rec = &k.io.stores[store];
                    for y in 0..rec.valid_lanes {
                        let dst_off = rec.offset + y;
                        let src_off = vals[&src][y].expect("real element stored");
                        // destination offset -> source offset through the block offsets
                        let pair = crate::planner::intra_block_offsets(p)
                            .into_iter()
                            .find(|&(_, d)| d == dst_off)
                            .unwrap();
                        assert_eq!(pair.0, src_off, "dst {dst_off}");
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_vectors_and_symmetry() {
        assert_eq!(fixed_swap_vector(4, 0), vec![0, 4, 2, 6]);
        assert_eq!(partner_vector(&[0, 4, 2, 6], 0), vec![1, 5, 3, 7]);
        assert_eq!(fixed_swap_vector(4, 1), vec![0, 1, 4, 5]);
        assert_eq!(partner_vector(&[0, 1, 4, 5], 1), vec![2, 3, 6, 7]);
    }

    #[test]
    fn worst_case_schedule_w4() {
        let p = plan(vec![2; 4], vec![2, 3, 0, 1], 4);
        let mut pool = ConstPool::new();
        let s = butterfly_schedule(&p, &mut pool);
        assert_eq!(s.steps.len(), 2);
        // step 1 exchanges i0 with i_{sigma_0}: distance-1 pairs
        assert_eq!(s.steps[0].lane_bit, 0);
        assert_eq!(s.steps[0].pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(s.steps[1].lane_bit, 1);
        assert_eq!(s.steps[1].pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(pool.get(s.steps[0].vectors.0).unwrap().lanes, fixed_swap_vector(4, 0));
        let k = assemble_block(&p, &mut ConstPool::new()).unwrap();
        assert_eq!(k.count(|o| matches!(o, MicroOp::Load { .. })), 4);
        assert_eq!(k.count(|o| matches!(o, MicroOp::Shuf { .. })), 8);
        assert_eq!(k.count(|o| matches!(o, MicroOp::Store { .. })), 4);
        check_routing(&p, &k);
    }

    #[test]
    fn figure_two_layout() {
        // after the permutation each register holds one (i1, i0) row
        let p = plan(vec![2; 4], vec![2, 3, 0, 1], 4);
        let k = assemble_block(&p, &mut ConstPool::new()).unwrap();
        check_routing(&p, &k);
        let model = LaneModel::new(&p);
        for t in 0..4 {
            let run: Vec<usize> = (0..4).map(|y| model.expected_store_lane(t, y).unwrap()).collect();
            // destination lane y = (i3 i2) bits, register t = (i1 i0); source offset = i0 + 2 i1 + 4 i2 + 8 i3
            let want: Vec<usize> = (0..4).map(|y| t + 4 * y).collect();
            assert_eq!(run, want);
        }
    }

    #[test]
    fn common_index_single_step() {
        let p = plan(vec![2; 4], vec![0, 3, 1, 2], 4);
        let mut pool = ConstPool::new();
        let s = butterfly_schedule(&p, &mut pool);
        assert_eq!(s.steps.len(), 1);
        assert_eq!(s.steps[0].pairs, vec![(0, 1)]);
        let k = assemble_block(&p, &mut pool).unwrap();
        check_routing(&p, &k);
    }

    #[test]
    fn identical_sets_no_shuffle() {
        let p = plan(vec![2; 4], vec![0, 1, 2, 3], 4);
        let mut pool = ConstPool::new();
        let s = butterfly_schedule(&p, &mut pool);
        assert!(s.steps.is_empty());
        assert_eq!(s.lane_perm, vec![0, 1, 2, 3]);
        assert_eq!(s.renames, vec![0]);
        let k = assemble_block(&p, &mut pool).unwrap();
        assert_eq!(k.count(|o| matches!(o, MicroOp::Shuf { .. } | MicroOp::SelfShuf { .. })), 0);
    }

    #[test]
    fn rename_column_swap() {
        // rows {i0,i1} swap order in the destination register numbering
        let p = plan(vec![2; 4], vec![2, 3, 1, 0], 4);
        let mut pool = ConstPool::new();
        let s = apply_register_rename(butterfly_schedule(&p, &mut pool), &p);
        assert_eq!(s.renames, vec![0b00, 0b10, 0b01, 0b11]);
        let id = plan(vec![2; 4], vec![2, 3, 0, 1], 4);
        let s = apply_register_rename(butterfly_schedule(&id, &mut pool), &id);
        assert_eq!(s.renames, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rename_reversal_w8() {
        let p = plan(vec![2; 6], vec![3, 4, 5, 2, 1, 0], 8);
        let mut pool = ConstPool::new();
        let s = apply_register_rename(butterfly_schedule(&p, &mut pool), &p);
        let rev3 = |x: usize| ((x & 1) << 2) | (x & 2) | ((x >> 2) & 1);
        assert_eq!(s.renames, (0..8).map(rev3).collect::<Vec<_>>());
        check_routing(&p, &assemble_block(&p, &mut pool).unwrap());
    }

    #[test]
    fn no_padding_no_pruning() {
        let p = plan(vec![2; 6], vec![3, 4, 5, 0, 1, 2], 8);
        let mut pool = ConstPool::new();
        let s = butterfly_schedule(&p, &mut pool);
        let pruned = prune_padded(s.clone(), &p, &pool);
        assert_eq!(pruned, s);
    }

    #[test]
    fn padded_registers_pruned() {
        // column extent 5 padded to 8 with w = 8: registers 5..7 are virtual
        let p = plan(vec![8, 5], vec![1, 0], 8);
        assert_eq!(p.num_registers, 8);
        let mut pool = ConstPool::new();
        let s = prune_padded(butterfly_schedule(&p, &mut pool), &p, &pool);
        assert_eq!(s.loaded, vec![true, true, true, true, true, false, false, false]);
        assert!(!s.aux_self_shuffles.is_empty());
        // validity-mask oracle: an output is pruned iff every lane is padding
        let model = LaneModel::new(&p);
        let trace = validity_trace(&model, &s);
        for (st, step) in s.steps.iter().enumerate() {
            for reg in 0..8 {
                let pruned = step.outputs[reg] == OutputKind::Pruned;
                assert_eq!(pruned, trace[st + 1][reg].is_none());
            }
        }
        let k = assemble_block(&p, &mut pool).unwrap();
        check_routing(&p, &k);
        assert_eq!(k.count(|o| matches!(o, MicroOp::Load { .. })), 5);
    }

    #[test]
    fn padded_row_masks() {
        // d0 = 3 padded to 4 with w = 4: each store carries 3 real lanes
        let p = plan(vec![3, 4], vec![1, 0], 4);
        let mut pool = ConstPool::new();
        let k = assemble_block(&p, &mut pool).unwrap();
        assert!(k.io.stores.iter().all(|s| s.valid_lanes == 4));
        let q = plan(vec![4, 3], vec![1, 0], 4);
        let k = assemble_block(&q, &mut pool).unwrap();
        assert!(k.io.stores.iter().all(|s| s.valid_lanes == 3));
        assert_eq!(k.io.loads.len(), 3);
        check_routing(&q, &k);
    }

    #[test]
    fn spread_two_by_three() {
        // rows (3, 2) padded to (4, 2) in one 8-lane register
        let p = plan(vec![3, 2, 8], vec![2, 0, 1], 8);
        let model = LaneModel::new(&p);
        assert_eq!(model.row_run(), 6);
        let spread = model.spread_table();
        // lanes 0..3 <- 0..3, lanes 4..7 <- 3..6; lanes 3 and 7 are padding
        assert_eq!(&spread[0..3], &[0, 1, 2]);
        assert_eq!(&spread[4..7], &[3, 4, 5]);
        let mut pool = ConstPool::new();
        let io = plan_io(&p, &mut pool).unwrap();
        assert!(io.loads.iter().all(|l| l.spread.is_some()));
    }

    #[test]
    fn aligned_case_plain_io() {
        let p = plan(vec![8, 8, 4], vec![1, 0, 2], 8);
        let mut pool = ConstPool::new();
        let io = plan_io(&p, &mut pool).unwrap();
        assert!(io.loads.iter().all(|l| l.aligned && l.spread.is_none()));
        assert!(io.stores.iter().all(|s| s.aligned && s.gather.is_none() && !s.tail_safe));
        assert!(io.tail_split.is_none());
        assert!(io.blend.is_none());
    }

    #[test]
    fn figure_four_tail() {
        // destination run of 5 with w = 8 along an outer next index
        let mut pool = ConstPool::new();
        let p = plan(vec![8, 6, 5], vec![2, 1, 0], 8);
        let io = plan_io(&p, &mut pool).unwrap();
        assert_eq!(io.dest_run, 5);
        let split = io.tail_split.unwrap();
        // run t is safe while t*5 + 8 <= 6*5
        assert_eq!(split.split_at, 5);
        let blend = pool.get(io.blend.unwrap()).unwrap();
        assert_eq!(blend.lanes, vec![0, 1, 2, 3, 4, 13, 14, 15]);
    }

    #[test]
    fn const_pool_dump() {
        let mut pool = ConstPool::new();
        let a = pool.intern(vec![0, 4, 2, 6]);
        assert_eq!(pool.intern(vec![0, 4, 2, 6]), a);
        assert_eq!(pool.dump(), "const 0 w=4 : 0 4 2 6\n");
    }

    proptest! {
        #[test]
        fn all_two_routing(n in 2usize..9, seed in any::<u64>(), lb in 2usize..5) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut sigma: Vec<usize> = (0..n).collect();
            sigma.shuffle(&mut rng);
            let p = plan(vec![2; n], sigma, 1 << lb);
            let mut pool = ConstPool::new();
            let k = assemble_block(&p, &mut pool).unwrap();
            let s = &k.schedule;
            prop_assert!(s.steps.len() <= lb);
            let mut r = s.renames.clone();
            r.sort_unstable();
            prop_assert_eq!(r, (0..p.num_registers).collect::<Vec<_>>());
            check_routing(&p, &k);
        }

        #[test]
        fn general_routing(
            (dims, sigma, lanes) in (1usize..5).prop_flat_map(|n| (
                proptest::collection::vec(1usize..12, n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                prop_oneof![Just(4usize), Just(8), Just(16)],
            ))
        ) {
            let p = plan(dims, sigma, lanes);
            let mut pool = ConstPool::new();
            let k = assemble_block(&p, &mut pool).unwrap();
            prop_assert!(k.schedule.steps.len() <= lanes.trailing_zeros() as usize);
            check_routing(&p, &k);
        }
    }
}
