//! Frame preprocessing: zero-pad to square, resize to the working
//! resolution, scale to [0,1]. Masks travel the same geometry with
//! nearest-neighbor resampling so they stay binary.

/// Zero-pad the shorter axis symmetrically to a square. When the padding
/// total is odd the extra pixel goes on the bottom/right.
pub fn pad_to_square(img: &[u8], height: usize, width: usize) -> (Vec<u8>, usize) {
    assert_eq!(img.len(), height * width);
    let side = height.max(width);
    if height == width {
        return (img.to_vec(), side);
    }
    let mut out = vec![0u8; side * side];
    let top = (side - height) / 2;
    let left = (side - width) / 2;
    for y in 0..height {
        let dst = (y + top) * side + left;
        out[dst..dst + width].copy_from_slice(&img[y * width..(y + 1) * width]);
    }
    (out, side)
}

/// Bilinear resize with the pixel-center convention
/// (`src = (dst + 0.5) * in/out - 0.5`). Constant images stay constant.
pub fn resize_bilinear(img: &[u8], side_in: usize, side_out: usize) -> Vec<u8> {
    assert_eq!(img.len(), side_in * side_in);
    if side_in == side_out {
        return img.to_vec();
    }
    let scale = side_in as f64 / side_out as f64;
    let mut out = vec![0u8; side_out * side_out];
    for oy in 0..side_out {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (side_in - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side_in - 1);
        let wy = sy - y0 as f64;
        for ox in 0..side_out {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (side_in - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side_in - 1);
            let wx = sx - x0 as f64;
            let v00 = img[y0 * side_in + x0] as f64;
            let v01 = img[y0 * side_in + x1] as f64;
            let v10 = img[y1 * side_in + x0] as f64;
            let v11 = img[y1 * side_in + x1] as f64;
            let v = v00 * (1.0 - wy) * (1.0 - wx)
                + v01 * (1.0 - wy) * wx
                + v10 * wy * (1.0 - wx)
                + v11 * wy * wx;
            out[oy * side_out + ox] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Nearest-neighbor resize (same sampling grid as the bilinear path).
pub fn resize_nearest(img: &[u8], side_in: usize, side_out: usize) -> Vec<u8> {
    assert_eq!(img.len(), side_in * side_in);
    if side_in == side_out {
        return img.to_vec();
    }
    let scale = side_in as f64 / side_out as f64;
    let mut out = vec![0u8; side_out * side_out];
    for oy in 0..side_out {
        let sy = (((oy as f64 + 0.5) * scale - 0.5).round()).clamp(0.0, (side_in - 1) as f64)
            as usize;
        for ox in 0..side_out {
            let sx = (((ox as f64 + 0.5) * scale - 0.5).round()).clamp(0.0, (side_in - 1) as f64)
                as usize;
            out[oy * side_out + ox] = img[sy * side_in + sx];
        }
    }
    out
}

/// Full image path: pad to square, bilinear resize to `working`, scale to
/// `[0,1]` as f32.
pub fn preprocess_image(img: &[u8], height: usize, width: usize, working: usize) -> Vec<f32> {
    let (sq, side) = pad_to_square(img, height, width);
    let resized = resize_bilinear(&sq, side, working);
    resized.iter().map(|&v| v as f32 / 255.0).collect()
}

/// Mask path: pad, nearest resize, collapse to {0,1}.
pub fn preprocess_mask(mask: &[u8], height: usize, width: usize, working: usize) -> Vec<u8> {
    let (sq, side) = pad_to_square(mask, height, width);
    let resized = resize_nearest(&sq, side, working);
    resized.iter().map(|&v| u8::from(v != 0)).collect()
}
