use crate::tensor::Tensor;
use crate::tokenizer::ScaleSchedule;

/// Additive score for blocked attention pairs; `exp` of it underflows to 0.
pub(crate) const BLOCKED: f64 = -1e9;

/// Attention permissions over `[prefix, tokens...]`.
///
/// Row `i` may attend column `j` iff `j` is the prefix or `j`'s scale is not
/// later than `i`'s. The prefix row sees only itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub size: usize,
    pub allowed: Vec<bool>,
}

impl BlockMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn additive(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { BLOCKED }).collect();
        Tensor::new(vec![self.size, self.size], data).expect("square mask")
    }
}

/// Mask over the first `n_scales` scales of `sched`.
pub fn block_causal_mask(sched: &ScaleSchedule, n_scales: usize) -> BlockMask {
    let mut scale_of = vec![0usize];
    for s in 0..n_scales.min(sched.len()) {
        scale_of.extend(std::iter::repeat_n(s + 1, sched.cells(s)));
    }
    let n = scale_of.len();
    let mut allowed = vec![false; n * n];
    // rows of one scale share a contiguous column block [0, end)
    let mut i = 0;
    while i < n {
        let s = scale_of[i];
        let rows = if s == 0 { 1 } else { sched.cells(s - 1) };
        let end = i + rows;
        for r in i..i + rows {
            allowed[r * n..r * n + end].iter_mut().for_each(|a| *a = true);
        }
        i += rows;
    }
    BlockMask { size: n, allowed }
}
