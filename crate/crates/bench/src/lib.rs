//! Benchmark fixtures shared by the criterion benches.

use permgen_core::campaign::random_input;
use permgen_core::{generate, GenerateOptions, Generated, MachineConfig, PermutationMap, Result, TensorLayout};

/// A generated kernel with a matching random input.
pub struct Fixture {
    pub label: String,
    pub generated: Generated,
    pub input: Vec<u8>,
}

impl Fixture {
    /// `shape` and `axes` in the outer-to-inner convention.
    pub fn new(shape: &[usize], axes: &[usize], machine: MachineConfig) -> Result<Fixture> {
        let layout = TensorLayout::from_shape(shape, machine.elem_width)?;
        let map = PermutationMap::from_numpy_convention(axes)?;
        let generated = generate(&layout, &map, &machine, &GenerateOptions::default())?;
        let input = random_input(layout.num_elements(), machine.elem_width, 1);
        Ok(Fixture {
            label: format!("{shape:?}/{axes:?}/w{}", machine.lanes()),
            generated,
            input,
        })
    }
}

/// Representative problems: a wide transpose, a channel shuffle, a padded
/// general shape and a rank-8 all-2 tensor.
pub fn standard_fixtures() -> Vec<Fixture> {
    let w16 = MachineConfig::abstract_512(4);
    let w8 = MachineConfig::abstract_512(8);
    [
        (vec![256, 256], vec![1, 0], w16),
        (vec![7, 32, 32, 3], vec![0, 2, 3, 1], w16),
        (vec![33, 17, 9], vec![2, 0, 1], w8),
        (vec![2; 8], vec![7, 5, 3, 1, 6, 4, 2, 0], w8),
    ]
    .into_iter()
    .map(|(s, a, m)| Fixture::new(&s, &a, m).expect("valid fixture"))
    .collect()
}
