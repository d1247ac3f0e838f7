use super::{ActiveSet, Rulebook};

/// Exact multiply-accumulates performed by a sparse convolution.
pub fn sparse_flops(rb: &Rulebook, cin: usize, cout: usize) -> u64 {
    rb.pair_count() as u64 * cin as u64 * cout as u64
}

/// In-bounds kernel taps along one axis, summed over all output positions.
fn axis_taps(input: usize, output: usize, k: usize, stride: usize, padding: usize) -> u64 {
    (0..output)
        .map(|o| {
            (0..k)
                .filter(|&t| {
                    let i = (o * stride + t) as isize - padding as isize;
                    i >= 0 && (i as usize) < input
                })
                .count() as u64
        })
        .sum()
}

/// Multiply-accumulates of the equivalent dense convolution over the full
/// grids of `input` and `output`. Taps landing in zero padding are not
/// counted, so a fully active submanifold layer matches its dense count.
pub fn dense_conv_macs(
    input: &ActiveSet,
    output: &ActiveSet,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
    cin: usize,
    cout: usize,
) -> u64 {
    let rows = axis_taps(input.height(), output.height(), kernel.0, stride, padding);
    let cols = axis_taps(input.width(), output.width(), kernel.1, stride, padding);
    output.batch() as u64 * rows * cols * cin as u64 * cout as u64
}
