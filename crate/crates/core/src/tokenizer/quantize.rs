use super::{Codebook, FeatureMap, ScaleSchedule, TokenPyramid};
use crate::error::{Error, Result};
use crate::tensor::{ResampleKind, Resampler};

/// Codeword map `[h_s, w_s, c]` for one token grid.
pub fn decode_grid(tokens: &[usize], scale: (usize, usize), cb: &Codebook) -> Result<FeatureMap> {
    if tokens.len() != scale.0 * scale.1 {
        return Err(Error::shape(
            "decode-grid",
            format!("{} tokens for scale {scale:?}", tokens.len()),
        ));
    }
    let mut values = Vec::with_capacity(tokens.len() * cb.dim());
    for &t in tokens {
        if t >= cb.size() {
            return Err(Error::InvalidArgument(format!(
                "token {t} out of range for codebook of {}",
                cb.size()
            )));
        }
        values.extend_from_slice(cb.vector(t));
    }
    Ok(FeatureMap {
        height: scale.0,
        width: scale.1,
        channels: cb.dim(),
        values,
    })
}

fn resample(map: &FeatureMap, kind: ResampleKind, dst: (usize, usize)) -> FeatureMap {
    let r = Resampler::new(kind, (map.height, map.width), dst);
    FeatureMap {
        height: dst.0,
        width: dst.1,
        channels: map.channels,
        values: r.apply(&map.values, map.channels),
    }
}

/// Bilinear up-sampling to `resolution`.
pub fn upsample_grid(map: &FeatureMap, resolution: (usize, usize)) -> FeatureMap {
    resample(map, ResampleKind::Bilinear, resolution)
}

fn downsample(map: &FeatureMap, dst: (usize, usize)) -> FeatureMap {
    resample(map, ResampleKind::AveragePool, dst)
}

/// Residual multi-scale quantization of `f` along `sched`.
///
/// Index 0 of a fitted codebook is the zero codeword. When a scale's
/// nearest-codeword map would increase the residual energy, that scale is
/// emitted as all zero-codeword tokens instead, so reconstruction error never
/// grows with additional scales.
pub fn multiscale_quantize(f: &FeatureMap, cb: &Codebook, sched: &ScaleSchedule) -> Result<TokenPyramid> {
    quantize_collecting(f, cb, sched, None)
}

/// Pooled residual cells `[Σ_s h_s w_s, c]` the quantizer matches against
/// the codebook, coarsest scale first.
pub fn pooled_residuals(f: &FeatureMap, cb: &Codebook, sched: &ScaleSchedule) -> Result<Vec<f64>> {
    let mut cells = Vec::new();
    quantize_collecting(f, cb, sched, Some(&mut cells))?;
    Ok(cells)
}

fn quantize_collecting(
    f: &FeatureMap,
    cb: &Codebook,
    sched: &ScaleSchedule,
    mut cells: Option<&mut Vec<f64>>,
) -> Result<TokenPyramid> {
    if !cb.trained {
        return Err(Error::State("codebook is untrained".into()));
    }
    if cb.dim() != f.channels {
        return Err(Error::shape(
            "multiscale-quantize",
            format!("codebook dim {} vs feature channels {}", cb.dim(), f.channels),
        ));
    }
    let resolution = (f.height, f.width);
    if sched.finest() != resolution {
        return Err(Error::shape(
            "multiscale-quantize",
            format!("finest scale {:?} vs feature map {resolution:?}", sched.finest()),
        ));
    }
    let zero = cb.zero_index();
    let mut residual = f.values.clone();
    let mut pyramid = TokenPyramid::empty(resolution);
    for &scale in sched.scales() {
        let current = FeatureMap {
            height: f.height,
            width: f.width,
            channels: f.channels,
            values: residual.clone(),
        };
        let pooled = downsample(&current, scale);
        if let Some(c) = cells.as_deref_mut() {
            c.extend_from_slice(&pooled.values);
        }
        let mut tokens: Vec<usize> = pooled
            .values
            .chunks(cb.dim())
            .map(|cell| cb.nearest(cell))
            .collect();
        let up = upsample_grid(&decode_grid(&tokens, scale, cb)?, resolution);
        let before: f64 = residual.iter().map(|r| r * r).sum();
        let after: f64 = residual.iter().zip(&up.values).map(|(r, u)| (r - u) * (r - u)).sum();
        match zero {
            Some(z) if after > before => tokens.iter_mut().for_each(|t| *t = z),
            _ => {
                for (r, u) in residual.iter_mut().zip(&up.values) {
                    *r -= u;
                }
            }
        }
        pyramid.push(scale, tokens)?;
    }
    Ok(pyramid)
}

/// `f = Σ_s up(decode(r_s), (h, w))`, accumulated coarsest first.
pub fn reconstruct(p: &TokenPyramid, cb: &Codebook) -> Result<FeatureMap> {
    let (h, w) = p.resolution;
    let mut acc = FeatureMap::zeros(h, w, cb.dim());
    for (scale, grid) in p.scales.iter().zip(&p.grids) {
        let up = upsample_grid(&decode_grid(grid, *scale, cb)?, p.resolution);
        for (a, u) in acc.values.iter_mut().zip(&up.values) {
            *a += u;
        }
    }
    Ok(acc)
}

/// Input map for scale `s + 1`: the partial sum of the first `s` scales
/// pooled to that scale's resolution.
pub fn next_scale_input(partial: &FeatureMap, s: usize, sched: &ScaleSchedule) -> Result<FeatureMap> {
    if s == 0 || s >= sched.len() {
        return Err(Error::InvalidArgument(format!(
            "no next scale after {s} of {}",
            sched.len()
        )));
    }
    if (partial.height, partial.width) != sched.finest() {
        return Err(Error::shape(
            "next-scale-input",
            format!(
                "partial sum is {}x{}, expected {:?}",
                partial.height,
                partial.width,
                sched.finest()
            ),
        ));
    }
    Ok(downsample(partial, sched.scales()[s]))
}
