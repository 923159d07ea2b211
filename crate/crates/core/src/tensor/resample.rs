//! Separable 2-D resampling for `[h, w, c]` feature maps.
//!
//! Both interpolators used by the codec are linear and separable, so each is
//! stored as a pair of sparse 1-D weight tables. The same table drives the
//! forward map and its transpose (the vector-Jacobian product).

/// Sparse 1-D interpolation table: `taps[o]` lists `(source index, weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis1d {
    pub src_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Axis1d {
    /// Exact window means with adaptive windows
    /// `[floor(o*n/m), ceil((o+1)*n/m))`.
    pub fn average_pool(src_len: usize, dst_len: usize) -> Self {
        let taps = (0..dst_len)
            .map(|o| {
                let start = (o * src_len) / dst_len;
                let end = ((o + 1) * src_len).div_ceil(dst_len);
                let n = (end - start) as f64;
                (start..end).map(|i| (i, 1.0 / n)).collect()
            })
            .collect();
        Self { src_len, taps }
    }

    /// Linear interpolation with the align-corners-false convention.
    pub fn bilinear(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                let lambda = src - i0 as f64;
                if i0 == i1 || lambda == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - lambda), (i1, lambda)]
                }
            })
            .collect();
        Self { src_len, taps }
    }

    pub fn dst_len(&self) -> usize {
        self.taps.len()
    }
}

/// Which interpolator a [`Resampler`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKind {
    AveragePool,
    Bilinear,
}

/// 2-D separable resampler `[h, w, c] -> [oh, ow, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub kind: ResampleKind,
    pub rows: Axis1d,
    pub cols: Axis1d,
}

impl Resampler {
    pub fn new(kind: ResampleKind, src: (usize, usize), dst: (usize, usize)) -> Self {
        let (rows, cols) = match kind {
            ResampleKind::AveragePool => (
                Axis1d::average_pool(src.0, dst.0),
                Axis1d::average_pool(src.1, dst.1),
            ),
            ResampleKind::Bilinear => (
                Axis1d::bilinear(src.0, dst.0),
                Axis1d::bilinear(src.1, dst.1),
            ),
        };
        Self { kind, rows, cols }
    }

    pub fn src(&self) -> (usize, usize) {
        (self.rows.src_len, self.cols.src_len)
    }

    pub fn dst(&self) -> (usize, usize) {
        (self.rows.dst_len(), self.cols.dst_len())
    }

    /// Forward map on row-major `[h, w, c]` data.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (_, sw) = self.src();
        let (oh, ow) = self.dst();
        let mut out = vec![0.0; oh * ow * channels];
        for (oi, row_taps) in self.rows.taps.iter().enumerate() {
            for (oj, col_taps) in self.cols.taps.iter().enumerate() {
                let dst = &mut out[(oi * ow + oj) * channels..(oi * ow + oj + 1) * channels];
                for &(pi, wr) in row_taps {
                    for &(pj, wc) in col_taps {
                        let weight = wr * wc;
                        let s = &src[(pi * sw + pj) * channels..(pi * sw + pj + 1) * channels];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += weight * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Transposed map: scatters `[oh, ow, c]` cotangents back to `[h, w, c]`.
    pub fn apply_transpose(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = self.src();
        let ow = self.cols.dst_len();
        let mut out = vec![0.0; sh * sw * channels];
        for (oi, row_taps) in self.rows.taps.iter().enumerate() {
            for (oj, col_taps) in self.cols.taps.iter().enumerate() {
                let g = &grad_out[(oi * ow + oj) * channels..(oi * ow + oj + 1) * channels];
                for &(pi, wr) in row_taps {
                    for &(pj, wc) in col_taps {
                        let weight = wr * wc;
                        let d = &mut out[(pi * sw + pj) * channels..(pi * sw + pj + 1) * channels];
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += weight * gv;
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_two_by_two_to_one() {
        let r = Resampler::new(ResampleKind::AveragePool, (2, 2), (1, 1));
        assert_eq!(r.apply(&[1.0, 2.0, 3.0, 4.0], 1), vec![2.5]);
    }

    #[test]
    fn pool_windows_cover_source() {
        for (n, m) in [(8, 3), (8, 6), (6, 4), (7, 7), (3, 2)] {
            let a = Axis1d::average_pool(n, m);
            assert_eq!(a.taps.first().unwrap()[0].0, 0);
            assert_eq!(a.taps.last().unwrap().last().unwrap().0, n - 1);
            for t in &a.taps {
                let s: f64 = t.iter().map(|x| x.1).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_from_single_cell_is_constant() {
        let r = Resampler::new(ResampleKind::Bilinear, (1, 1), (4, 3));
        let out = r.apply(&[0.5, -1.0], 2);
        for cell in out.chunks(2) {
            assert_eq!(cell, &[0.5, -1.0]);
        }
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let r = Resampler::new(ResampleKind::Bilinear, (3, 5), (3, 5));
        let src: Vec<f64> = (0..15).map(|i| i as f64 * 0.25).collect();
        assert_eq!(r.apply(&src, 1), src);
    }

    #[test]
    fn bilinear_half_pixel_offsets() {
        // 2 -> 4 upsampling: centres at -0.25 (clamped), 0.25, 0.75, 1.25
        let a = Axis1d::bilinear(2, 4);
        assert_eq!(a.taps[0], vec![(0, 1.0)]);
        assert_eq!(a.taps[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(a.taps[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(a.taps[3], vec![(1, 1.0)]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let r = Resampler::new(ResampleKind::Bilinear, (3, 4), (5, 2));
        let x: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..20).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let ax = r.apply(&x, 2);
        let aty = r.apply_transpose(&y, 2);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
