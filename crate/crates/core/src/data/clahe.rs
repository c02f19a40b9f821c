//! Contrast-limited adaptive histogram equalization over a tile grid with
//! bilinear interpolation of the per-tile mappings between tile centers.
//!
//! Conventions (shared with the global-equalization oracle in the tests):
//! the per-tile lookup table is `round((cdf(v) − cdf_min) / (T − cdf_min)
//! * 255)` with `cdf_min` the first nonzero cdf value; a tile whose
//! histogram occupies a single bin has no contrast to spread and gets the
//! identity mapping. Clipping caps each bin at `clip_limit * T / 256`
//! (floored, min 1) and redistributes the excess equally, leftover
//! round-robin from bin 0. Edge tiles read out-of-range pixels by clamping
//! to the border.

/// 8-bit CLAHE. `tiles_y` x `tiles_x` is the tile grid; `clip_limit` is
/// relative to the uniform bin height (pass `f64::INFINITY` to disable
/// clipping). A 1x1 grid with infinite clip is plain global equalization.
pub fn clahe(
    img: &[u8],
    height: usize,
    width: usize,
    clip_limit: f64,
    tiles_y: usize,
    tiles_x: usize,
) -> Vec<u8> {
    assert_eq!(img.len(), height * width);
    assert!(tiles_y >= 1 && tiles_x >= 1 && clip_limit > 0.0);
    let tile_h = height.div_ceil(tiles_y);
    let tile_w = width.div_ceil(tiles_x);

    // one LUT per tile, histograms taken over border-clamped tile windows
    let mut luts = vec![[0u8; 256]; tiles_y * tiles_x];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; 256];
            for dy in 0..tile_h {
                let y = (ty * tile_h + dy).min(height - 1);
                for dx in 0..tile_w {
                    let x = (tx * tile_w + dx).min(width - 1);
                    hist[img[y * width + x] as usize] += 1;
                }
            }
            luts[ty * tiles_x + tx] = tile_lut(&hist, clip_limit);
        }
    }

    if tiles_y == 1 && tiles_x == 1 {
        return img.iter().map(|&v| luts[0][v as usize]).collect();
    }

    // interpolate mappings between tile centers; clamp beyond them
    let mut out = vec![0u8; img.len()];
    for y in 0..height {
        let fy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
        let y0 = fy.floor().max(0.0) as usize;
        let y0 = y0.min(tiles_y - 1);
        let y1 = (y0 + 1).min(tiles_y - 1);
        let wy = (fy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..width {
            let fx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
            let x0 = fx.floor().max(0.0) as usize;
            let x0 = x0.min(tiles_x - 1);
            let x1 = (x0 + 1).min(tiles_x - 1);
            let wx = (fx - x0 as f64).clamp(0.0, 1.0);
            let v = img[y * width + x] as usize;
            let v00 = luts[y0 * tiles_x + x0][v] as f64;
            let v01 = luts[y0 * tiles_x + x1][v] as f64;
            let v10 = luts[y1 * tiles_x + x0][v] as f64;
            let v11 = luts[y1 * tiles_x + x1][v] as f64;
            let blended = v00 * (1.0 - wy) * (1.0 - wx)
                + v01 * (1.0 - wy) * wx
                + v10 * wy * (1.0 - wx)
                + v11 * wy * wx;
            out[y * width + x] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn tile_lut(hist: &[u32; 256], clip_limit: f64) -> [u8; 256] {
    let total: u64 = hist.iter().map(|&h| u64::from(h)).sum();
    let occupied = hist.iter().filter(|&&h| h > 0).count();
    let mut lut = [0u8; 256];
    if occupied <= 1 {
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = v as u8;
        }
        return lut;
    }

    let mut clipped: [u64; 256] = std::array::from_fn(|i| u64::from(hist[i]));
    if clip_limit.is_finite() {
        let cap = ((clip_limit * total as f64 / 256.0).floor() as u64).max(1);
        let mut excess = 0u64;
        for h in clipped.iter_mut() {
            if *h > cap {
                excess += *h - cap;
                *h = cap;
            }
        }
        let share = excess / 256;
        let remainder = (excess % 256) as usize;
        for (i, h) in clipped.iter_mut().enumerate() {
            *h += share + u64::from(i < remainder);
        }
    }

    let mut cdf = 0u64;
    let mut cdf_min = 0u64;
    let mut seen_first = false;
    let mut cdfs = [0u64; 256];
    for (i, &h) in clipped.iter().enumerate() {
        cdf += h;
        cdfs[i] = cdf;
        if !seen_first && h > 0 {
            cdf_min = cdf;
            seen_first = true;
        }
    }
    let denom = (total - cdf_min) as f64;
    for (v, slot) in lut.iter_mut().enumerate() {
        if denom <= 0.0 {
            *slot = v as u8; // all mass below the first bin: degenerate
        } else {
            // entries below the first occupied bin saturate to 0
            let scaled = cdfs[v].saturating_sub(cdf_min) as f64 / denom * 255.0;
            *slot = scaled.round().clamp(0.0, 255.0) as u8;
        }
    }
    lut
}
