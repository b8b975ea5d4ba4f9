//! Dense tensor layouts, permutation maps and the scalar reference permutation.
//!
//! Index 0 is always the innermost (stride-1) dimension. A permutation map
//! `sigma` states that destination dimension `j` is source dimension
//! `sigma[j]`, so destination coordinate `b_j` equals source coordinate
//! `a_{sigma[j]}`.

use std::fmt;

use crate::error::{Error, Result};

/// Dense strides (in elements) for dimensions listed innermost first.
pub fn compute_strides(dims: &[usize]) -> Result<Vec<usize>> {
    if dims.is_empty() {
        return Err(Error::InvalidLayout("empty dimension list".into()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::InvalidLayout(format!("dimension {pos} has size 0")));
    }
    let mut strides = Vec::with_capacity(dims.len());
    let mut acc = 1usize;
    for &d in dims {
        strides.push(acc);
        acc = acc
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidLayout("element count overflows".into()))?;
    }
    Ok(strides)
}

/// Shape, dense strides and element width of a tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorLayout {
    dims: Vec<usize>,
    strides: Vec<usize>,
    elem_width: usize,
}

impl TensorLayout {
    /// Builds a dense layout from dimensions listed innermost first.
    pub fn new(dims: Vec<usize>, elem_width: usize) -> Result<Self> {
        if elem_width != 4 && elem_width != 8 {
            return Err(Error::InvalidLayout(format!(
                "element width must be 4 or 8 bytes, got {elem_width}"
            )));
        }
        let strides = compute_strides(&dims)?;
        Ok(TensorLayout {
            dims,
            strides,
            elem_width,
        })
    }

    /// Builds a dense layout from a shape written outermost first (NumPy order).
    pub fn from_shape(shape: &[usize], elem_width: usize) -> Result<Self> {
        Self::new(shape.iter().rev().copied().collect(), elem_width)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Dimensions, innermost first.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Strides in elements, innermost first.
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn elem_width(&self) -> usize {
        self.elem_width
    }

    /// Shape written outermost first.
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().rev().copied().collect()
    }

    pub fn num_elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_bytes(&self) -> usize {
        self.num_elements() * self.elem_width
    }
}

impl fmt::Display for TensorLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape: Vec<String> = self.shape().iter().map(|d| d.to_string()).collect();
        write!(f, "({}) x {}B", shape.join(", "), self.elem_width)
    }
}

/// Bijection on dimension indices; `sigma()[j]` is the source dimension that
/// becomes destination dimension `j` (both counted innermost first).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermutationMap {
    sigma: Vec<usize>,
}

impl PermutationMap {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        if n == 0 {
            return Err(Error::InvalidMap("empty map".into()));
        }
        let mut seen = vec![false; n];
        for &s in &sigma {
            if s >= n {
                return Err(Error::InvalidMap(format!("entry {s} out of range for rank {n}")));
            }
            if seen[s] {
                return Err(Error::InvalidMap(format!("entry {s} repeated")));
            }
            seen[s] = true;
        }
        Ok(PermutationMap { sigma })
    }

    /// Builds a map from the conventional listing `(sigma_{n-1}, ..., sigma_0)`.
    pub fn from_listing(listing: &[usize]) -> Result<Self> {
        Self::new(listing.iter().rev().copied().collect())
    }

    pub fn identity(rank: usize) -> Self {
        PermutationMap {
            sigma: (0..rank).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    /// `(sigma_{n-1}, ..., sigma_0)`.
    pub fn listing(&self) -> Vec<usize> {
        self.sigma.iter().rev().copied().collect()
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(j, &s)| j == s)
    }

    /// Destination position of every source dimension.
    pub fn inverse(&self) -> PermutationMap {
        let mut inv = vec![0; self.sigma.len()];
        for (j, &s) in self.sigma.iter().enumerate() {
            inv[s] = j;
        }
        PermutationMap { sigma: inv }
    }

    /// The map equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &PermutationMap) -> Result<PermutationMap> {
        if next.rank() != self.rank() {
            return Err(Error::RankMismatch {
                layout: self.rank(),
                map: next.rank(),
            });
        }
        Ok(PermutationMap {
            sigma: next.sigma.iter().map(|&j| self.sigma[j]).collect(),
        })
    }

    /// Axis list in NumPy `transpose` order: `(n-1-sigma_{n-1}, ..., n-1-sigma_0)`.
    pub fn to_numpy_convention(&self) -> Vec<usize> {
        let n = self.rank();
        self.sigma.iter().rev().map(|&s| n - 1 - s).collect()
    }

    pub fn from_numpy_convention(axes: &[usize]) -> Result<Self> {
        let n = axes.len();
        if let Some(&bad) = axes.iter().find(|&&a| a >= n) {
            return Err(Error::InvalidMap(format!("axis {bad} out of range for rank {n}")));
        }
        Self::new(axes.iter().rev().map(|&a| n - 1 - a).collect())
    }
}

impl fmt::Display for PermutationMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.listing().iter().map(|s| s.to_string()).collect();
        write!(f, "({})", items.join(", "))
    }
}

/// Layout of the permuted tensor: `dims[j] = input.dims[sigma[j]]`.
pub fn permuted_layout(layout: &TensorLayout, map: &PermutationMap) -> Result<TensorLayout> {
    check_rank(layout, map)?;
    let dims = map.sigma().iter().map(|&s| layout.dims()[s]).collect();
    TensorLayout::new(dims, layout.elem_width())
}

pub(crate) fn check_rank(layout: &TensorLayout, map: &PermutationMap) -> Result<()> {
    if layout.rank() != map.rank() {
        return Err(Error::RankMismatch {
            layout: layout.rank(),
            map: map.rank(),
        });
    }
    Ok(())
}

/// Destination offset to source offset mapping of a permutation.
///
/// Closed form by default (mixed-radix decode over the destination shape);
/// [`ElementBijection::materialize`] switches to a lookup table when the same
/// permutation is applied many times.
#[derive(Clone, Debug)]
pub struct ElementBijection {
    dst_dims: Vec<usize>,
    src_steps: Vec<usize>,
    len: usize,
    table: Option<Vec<usize>>,
}

impl ElementBijection {
    pub fn new(layout: &TensorLayout, map: &PermutationMap) -> Result<Self> {
        check_rank(layout, map)?;
        let dst_dims = map.sigma().iter().map(|&s| layout.dims()[s]).collect();
        let src_steps = map.sigma().iter().map(|&s| layout.strides()[s]).collect();
        Ok(ElementBijection {
            dst_dims,
            src_steps,
            len: layout.num_elements(),
            table: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn materialize(mut self) -> Self {
        if self.table.is_none() {
            self.table = Some(self.iter().collect());
        }
        self
    }

    pub fn is_materialized(&self) -> bool {
        self.table.is_some()
    }

    /// Source offset of destination offset `dst`.
    pub fn source_of(&self, dst: usize) -> usize {
        if let Some(t) = &self.table {
            return t[dst];
        }
        let mut rem = dst;
        let mut src = 0;
        for (&d, &s) in self.dst_dims.iter().zip(&self.src_steps) {
            src += (rem % d) * s;
            rem /= d;
        }
        src
    }

    /// Source offsets in destination order, computed with an odometer.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let mut coord = vec![0usize; self.dst_dims.len()];
        let mut src = 0usize;
        (0..self.len).map(move |i| {
            if let Some(t) = &self.table {
                return t[i];
            }
            let out = src;
            for (j, c) in coord.iter_mut().enumerate() {
                *c += 1;
                src += self.src_steps[j];
                if *c < self.dst_dims[j] {
                    break;
                }
                src -= self.src_steps[j] * self.dst_dims[j];
                *c = 0;
            }
            out
        })
    }
}

/// Scalar reference permutation: `output[i] = input[f(i)]`.
///
/// Elements are copied as opaque `elem_width`-byte words.
pub fn naive_permute(input: &[u8], layout: &TensorLayout, map: &PermutationMap) -> Result<Vec<u8>> {
    let expected = layout.num_bytes();
    if input.len() != expected {
        return Err(Error::BufferSize {
            expected,
            actual: input.len(),
        });
    }
    let f = ElementBijection::new(layout, map)?;
    let w = layout.elem_width();
    let mut out = vec![0u8; expected];
    for (chunk, src) in out.chunks_exact_mut(w).zip(f.iter()) {
        chunk.copy_from_slice(&input[src * w..src * w + w]);
    }
    Ok(out)
}

/// Little-endian element buffer holding `0, 1, 2, ...`; handy for tests.
pub fn iota_buffer(n: usize, elem_width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * elem_width);
    for i in 0..n as u64 {
        out.extend_from_slice(&i.to_le_bytes()[..elem_width]);
    }
    out
}

/// Decodes a little-endian element buffer into integers.
pub fn decode_elements(buf: &[u8], elem_width: usize) -> Vec<u64> {
    buf.chunks_exact(elem_width)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..elem_width].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outer_first(v: Vec<usize>) -> Vec<usize> {
        v.into_iter().rev().collect()
    }

    /// Independent oracle: decode every source coordinate tuple and re-encode
    /// it in the destination layout.
    fn coordinate_permute(input: &[u64], dims: &[usize], sigma: &[usize]) -> Vec<u64> {
        let n: usize = dims.iter().product();
        let dst_dims: Vec<usize> = sigma.iter().map(|&s| dims[s]).collect();
        let mut out = vec![0; n];
        for (src, &v) in input.iter().enumerate() {
            let mut a = vec![0; dims.len()];
            let mut rem = src;
            for (k, &d) in dims.iter().enumerate() {
                a[k] = rem % d;
                rem /= d;
            }
            let mut dst = 0;
            let mut mul = 1;
            for (j, &s) in sigma.iter().enumerate() {
                dst += a[s] * mul;
                mul *= dst_dims[j];
            }
            out[dst] = v;
        }
        out
    }

    #[test]
    fn strides_examples() {
        let s = compute_strides(&outer_first(vec![3, 5, 7])).unwrap();
        assert_eq!(outer_first(s), vec![35, 7, 1]);
        assert_eq!(compute_strides(&[5]).unwrap(), vec![1]);
        let s = compute_strides(&outer_first(vec![2, 16, 8, 4])).unwrap();
        assert_eq!(outer_first(s), vec![512, 32, 4, 1]);
        assert!(matches!(compute_strides(&[]), Err(Error::InvalidLayout(_))));
        assert!(compute_strides(&[3, 0]).is_err());
    }

    #[test]
    fn layout_rejects_bad_width() {
        assert!(TensorLayout::new(vec![4], 2).is_err());
        assert!(TensorLayout::new(vec![4], 8).is_ok());
    }

    #[test]
    fn permuted_layout_examples() {
        let l = TensorLayout::from_shape(&[2, 16, 8, 4], 4).unwrap();
        let m = PermutationMap::from_listing(&[0, 2, 1, 3]).unwrap();
        // new shape is (d_{sigma_3}, d_{sigma_2}, d_{sigma_1}, d_{sigma_0}) = (d_0, d_2, d_1, d_3)
        assert_eq!(permuted_layout(&l, &m).unwrap().shape(), vec![4, 16, 8, 2]);
        // full reversal of the index roles gives (4, 8, 16, 2)
        let rev = PermutationMap::from_listing(&[0, 1, 2, 3]).unwrap();
        assert_eq!(permuted_layout(&l, &rev).unwrap().shape(), vec![4, 8, 16, 2]);

        let id = PermutationMap::identity(4);
        assert_eq!(permuted_layout(&l, &id).unwrap(), l);

        let bad = PermutationMap::identity(3);
        assert!(matches!(permuted_layout(&l, &bad), Err(Error::RankMismatch { .. })));
    }

    #[test]
    fn reversal_of_all_two_is_bit_reversal() {
        let l = TensorLayout::from_shape(&[2, 2, 2], 4).unwrap();
        let m = PermutationMap::from_listing(&[0, 1, 2]).unwrap();
        let f = ElementBijection::new(&l, &m).unwrap();
        // enumerated by hand: dst offset bits (b2 b1 b0) = (a0 a1 a2)
        let got: Vec<usize> = (0..8).map(|i| f.source_of(i)).collect();
        assert_eq!(got, vec![0, 4, 2, 6, 1, 5, 3, 7]);
    }

    #[test]
    fn numpy_conversion() {
        let m = PermutationMap::from_listing(&[3, 1, 0, 2]).unwrap();
        assert_eq!(m.to_numpy_convention(), vec![0, 2, 3, 1]);
        assert_eq!(PermutationMap::identity(5).to_numpy_convention(), vec![0, 1, 2, 3, 4]);
        let swap = PermutationMap::from_listing(&[0, 1]).unwrap();
        assert_eq!(swap.to_numpy_convention(), vec![1, 0]);
        assert_eq!(PermutationMap::from_numpy_convention(&[0, 2, 3, 1]).unwrap(), m);
        assert!(PermutationMap::from_numpy_convention(&[0, 0]).is_err());
        assert!(PermutationMap::from_numpy_convention(&[0, 2]).is_err());
    }

    #[test]
    fn numpy_swap_matches_transpose_on_2x3() {
        // NumPy: x.reshape(2, 3).transpose(1, 0)
        let l = TensorLayout::from_shape(&[2, 3], 4).unwrap();
        let m = PermutationMap::from_numpy_convention(&[1, 0]).unwrap();
        let out = naive_permute(&iota_buffer(6, 4), &l, &m).unwrap();
        let brute: Vec<u64> = (0..3).flat_map(|c| (0..2).map(move |r| (r * 3 + c) as u64)).collect();
        assert_eq!(decode_elements(&out, 4), brute);
        assert_eq!(m, PermutationMap::from_listing(&[0, 1]).unwrap());
    }

    #[test]
    fn naive_examples() {
        let l = TensorLayout::from_shape(&[2, 3], 4).unwrap();
        let id = PermutationMap::identity(2);
        let input = iota_buffer(6, 4);
        assert_eq!(naive_permute(&input, &l, &id).unwrap(), input);
        let t = PermutationMap::new(vec![1, 0]).unwrap();
        let out = naive_permute(&input, &l, &t).unwrap();
        assert_eq!(decode_elements(&out, 4), vec![0, 3, 1, 4, 2, 5]);
        assert!(matches!(
            naive_permute(&input[..8], &l, &t),
            Err(Error::BufferSize { .. })
        ));
    }

    #[test]
    fn table_mode_agrees() {
        let l = TensorLayout::from_shape(&[3, 4, 5], 8).unwrap();
        let m = PermutationMap::new(vec![2, 0, 1]).unwrap();
        let f = ElementBijection::new(&l, &m).unwrap();
        let closed: Vec<usize> = f.iter().collect();
        let t = f.materialize();
        assert!(t.is_materialized());
        assert_eq!(t.iter().collect::<Vec<_>>(), closed);
        assert_eq!((0..60).map(|i| t.source_of(i)).collect::<Vec<_>>(), closed);
    }

    fn arb_case(max_rank: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
        (1..=max_rank)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(1usize..5, n),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                )
            })
    }

    proptest! {
        #[test]
        fn matches_coordinate_oracle((dims, sigma, _) in arb_case(6)) {
            let l = TensorLayout::new(dims.clone(), 4).unwrap();
            let m = PermutationMap::new(sigma.clone()).unwrap();
            let n = l.num_elements();
            let input: Vec<u64> = (0..n as u64).map(|i| i * 7919 % 65521).collect();
            let bytes: Vec<u8> = input.iter().flat_map(|v| (*v as u32).to_le_bytes()).collect();
            let out = decode_elements(&naive_permute(&bytes, &l, &m).unwrap(), 4);
            prop_assert_eq!(out, coordinate_permute(&input, &dims, &sigma));
        }

        #[test]
        fn round_trip_and_composition((dims, s1, s2) in arb_case(6)) {
            let l = TensorLayout::new(dims, 8).unwrap();
            let m1 = PermutationMap::new(s1).unwrap();
            let m2 = PermutationMap::new(s2).unwrap();
            let input = iota_buffer(l.num_elements(), 8);
            let b = naive_permute(&input, &l, &m1).unwrap();
            let lb = permuted_layout(&l, &m1).unwrap();
            prop_assert_eq!(lb.num_elements(), l.num_elements());
            let back = naive_permute(&b, &lb, &m1.inverse()).unwrap();
            prop_assert_eq!(&back, &input);
            let c = naive_permute(&b, &lb, &m2).unwrap();
            let direct = naive_permute(&input, &l, &m1.then(&m2).unwrap()).unwrap();
            prop_assert_eq!(c, direct);
        }

        #[test]
        fn numpy_round_trip((dims, sigma, _) in arb_case(6)) {
            let m = PermutationMap::new(sigma).unwrap();
            let axes = m.to_numpy_convention();
            prop_assert_eq!(&PermutationMap::from_numpy_convention(&axes).unwrap(), &m);
            // numpy semantics: out.shape[p] = in.shape[axes[p]]
            let l = TensorLayout::new(dims, 4).unwrap();
            let shape = l.shape();
            let np_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
            prop_assert_eq!(permuted_layout(&l, &m).unwrap().shape(), np_shape);
        }
    }
}
