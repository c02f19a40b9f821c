//! Synthetic blind-sweep phantom generator.
//!
//! Each patient gets six sweeps (three transverse, three sagittal) of 140
//! speckled grayscale frames. In a few randomly chosen sweeps an elliptical
//! structure appears over a contiguous frame window, its cross-section
//! growing then shrinking as the sweep passes through; those frames carry a
//! foreground mask of the ellipse interior and label 1. Multiplicative
//! speckle and a smooth low-contrast bias field cover every frame.
//!
//! Every frame is generated from its own seed derived from
//! `(dataset seed, patient, sweep, frame)`, so output is byte-identical
//! regardless of generation order or worker count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pgm::write_pgm;
use super::{DataError, DatasetPaths, FrameRecord, Manifest, ManifestMeta, SweepAxis};

pub const SWEEPS_PER_PATIENT: usize = 6;
pub const FRAMES_PER_SWEEP: usize = 140;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub native_height: usize,
    pub native_width: usize,
    /// Probability weights for 1, 2, or 3 positive sweeps per patient.
    /// The default mix targets the calibrated raw prevalence of ~2.6%.
    pub positive_sweep_weights: [f64; 3],
    /// Inclusive window-length range (frames) the structure stays visible.
    pub window_min: usize,
    pub window_max: usize,
    /// Ellipse major radius at the window edges and its peak range.
    pub radius_min: f64,
    pub radius_peak_lo: f64,
    pub radius_peak_hi: f64,
    /// Minor/major axis ratio range.
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    pub background_level: f64,
    pub interior_brightness: f64,
    pub rim_brightness: f64,
    pub speckle_sigma: f64,
    pub bias_strength: f64,
    /// When false, rasterize masks only to decide labels and skip all
    /// image/mask file output (manifest-only mode for protocol checks).
    pub write_files: bool,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            native_height: 96,
            native_width: 128,
            positive_sweep_weights: [0.50, 0.35, 0.15],
            window_min: 10,
            window_max: 16,
            radius_min: 12.0,
            radius_peak_lo: 16.0,
            radius_peak_hi: 24.0,
            aspect_lo: 0.70,
            aspect_hi: 0.95,
            background_level: 70.0,
            interior_brightness: 45.0,
            rim_brightness: 110.0,
            speckle_sigma: 0.25,
            bias_strength: 0.15,
            write_files: true,
        }
    }
}

/// Stable seed mixing (splitmix64 over the tuple), independent of any
/// hasher implementation details.
pub(crate) fn stable_mix(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 31;
        state = state.wrapping_mul(0x94D0_49BB_1331_11EB);
        state ^= state >> 29;
    }
    state
}

const STREAM_PATIENT: u64 = 1;
const STREAM_FRAME: u64 = 2;
pub(crate) const STREAM_AUGMENT: u64 = 3;

struct SweepPlan {
    axis: SweepAxis,
    /// Some iff this sweep passes through the structure.
    window: Option<WindowPlan>,
}

struct WindowPlan {
    start: usize,
    len: usize,
    peak_radius: f64,
    aspect: f64,
    cx: f64,
    cy: f64,
}

fn plan_patient(seed: u64, patient: usize, p: &GeneratorParams) -> Vec<SweepPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_mix(&[seed, patient as u64, STREAM_PATIENT]));
    let w = &p.positive_sweep_weights;
    let total = w[0] + w[1] + w[2];
    let draw: f64 = rng.random_range(0.0..total);
    let n_pos = if draw < w[0] {
        1
    } else if draw < w[0] + w[1] {
        2
    } else {
        3
    };
    let mut ids: Vec<usize> = (0..SWEEPS_PER_PATIENT).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let positive: Vec<usize> = ids[..n_pos].to_vec();

    (0..SWEEPS_PER_PATIENT)
        .map(|s| {
            // first three sweeps transverse, last three sagittal
            let axis = if s < 3 { SweepAxis::Transverse } else { SweepAxis::Sagittal };
            let window = positive.contains(&s).then(|| {
                let len = rng.random_range(p.window_min..=p.window_max);
                let start = rng.random_range(0..=FRAMES_PER_SWEEP - len);
                let peak_radius = rng.random_range(p.radius_peak_lo..p.radius_peak_hi);
                let aspect = rng.random_range(p.aspect_lo..p.aspect_hi);
                let margin = peak_radius + 4.0;
                let cx = rng.random_range(margin..p.native_width as f64 - margin);
                let cy = rng.random_range(margin..p.native_height as f64 - margin);
                WindowPlan { start, len, peak_radius, aspect, cx, cy }
            });
            SweepPlan { axis, window }
        })
        .collect()
}

/// Rendered frame: image, mask, and the label implied by the mask.
pub(crate) struct RenderedFrame {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub label: u8,
}

fn render_frame(
    seed: u64,
    patient: usize,
    sweep: usize,
    frame: usize,
    plan: &SweepPlan,
    p: &GeneratorParams,
) -> RenderedFrame {
    let (h, w) = (p.native_height, p.native_width);
    let mut rng = ChaCha8Rng::seed_from_u64(stable_mix(&[
        seed,
        patient as u64,
        sweep as u64,
        frame as u64,
        STREAM_FRAME,
    ]));
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    // ellipse geometry for this frame, if inside the sweep window
    let ellipse = plan.window.as_ref().and_then(|win| {
        if frame < win.start || frame >= win.start + win.len {
            return None;
        }
        let t = (frame - win.start) as f64 + 0.5;
        let bump = (std::f64::consts::PI * t / win.len as f64).sin();
        let major = p.radius_min + (win.peak_radius - p.radius_min) * bump;
        let minor = major * win.aspect;
        // transverse structures lie wide, sagittal ones tall
        let (ra, rb) = match plan.axis {
            SweepAxis::Transverse => (major, minor),
            SweepAxis::Sagittal => (minor, major),
        };
        let jx: f64 = rng.random_range(-1.5..1.5);
        let jy: f64 = rng.random_range(-1.5..1.5);
        Some((win.cx + jx, win.cy + jy, ra, rb))
    });

    // smooth multiplicative bias field
    let beta: f64 = rng.random_range(0.0..p.bias_strength);
    let phi1: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phi2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let grad: f64 = rng.random_range(-0.25..0.25);

    let mut image = vec![0u8; h * w];
    let mut mask = vec![0u8; h * w];
    let mut foreground = 0usize;
    for y in 0..h {
        let fy = y as f64 / h as f64;
        for x in 0..w {
            let fx = x as f64 / w as f64;
            let mut v = p.background_level * (1.0 + grad * (fy - 0.5));
            if let Some((cx, cy, ra, rb)) = ellipse {
                let ex = (x as f64 - cx) / ra;
                let ey = (y as f64 - cy) / rb;
                let e = ex * ex + ey * ey;
                if e <= 1.0 {
                    mask[y * w + x] = 255;
                    foreground += 1;
                    v += p.interior_brightness * (1.0 - 0.3 * e);
                }
                let r = e.sqrt();
                if (r - 1.0).abs() <= 0.15 {
                    v += p.rim_brightness * (1.0 - (r - 1.0).abs() / 0.15);
                }
            }
            let bias = 1.0
                + beta
                    * (std::f64::consts::PI * fx + phi1).sin()
                    * (std::f64::consts::PI * fy + phi2).sin();
            let speckle = 1.0 + p.speckle_sigma * normal.sample(&mut rng);
            let val = (v * bias * speckle).round().clamp(0.0, 255.0);
            image[y * w + x] = val as u8;
        }
    }
    RenderedFrame { image, mask, label: u8::from(foreground > 0) }
}

/// Generate `n_patients` worth of sweeps under `out_dir` and return the
/// manifest. With `params.write_files == false` only the manifest is
/// produced (labels still come from actually rasterized masks).
pub fn generate_dataset(
    n_patients: usize,
    seed: u64,
    out_dir: &Path,
    params: &GeneratorParams,
) -> Result<Manifest, DataError> {
    if n_patients == 0 {
        return Err(DataError::Format("n_patients must be >= 1".into()));
    }
    let paths = DatasetPaths::new(out_dir);
    let mut records = Vec::with_capacity(n_patients * SWEEPS_PER_PATIENT * FRAMES_PER_SWEEP);
    let mut positives = 0usize;
    for patient in 0..n_patients {
        let patient_id = format!("p{patient:04}");
        let plans = plan_patient(seed, patient, params);
        for (sweep, plan) in plans.iter().enumerate() {
            for frame in 0..FRAMES_PER_SWEEP {
                let rendered = render_frame(seed, patient, sweep, frame, plan, params);
                let image_path = format!("images/{patient_id}/s{sweep}/f{frame:03}.pgm");
                let mask_path = format!("masks/{patient_id}/s{sweep}/f{frame:03}.pgm");
                if params.write_files {
                    write_pgm(
                        &paths.resolve(&image_path),
                        params.native_width,
                        params.native_height,
                        &rendered.image,
                    )?;
                    write_pgm(
                        &paths.resolve(&mask_path),
                        params.native_width,
                        params.native_height,
                        &rendered.mask,
                    )?;
                }
                positives += usize::from(rendered.label == 1);
                records.push(FrameRecord {
                    patient_id: patient_id.clone(),
                    sweep_id: sweep as u8,
                    sweep_axis: plan.axis,
                    frame_index: frame as u16,
                    image_path,
                    mask_path,
                    label: rendered.label,
                    version: 0,
                });
            }
        }
    }
    let total = records.len();
    let manifest = Manifest {
        meta: ManifestMeta {
            seed,
            native_height: params.native_height,
            native_width: params.native_width,
            n_patients,
            total_frames: total,
            positive_frames: positives,
            prevalence: positives as f64 / total as f64,
            files_written: params.write_files,
        },
        records,
    };
    manifest.save(&paths.manifest())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_params() -> GeneratorParams {
        GeneratorParams { write_files: false, ..Default::default() }
    }

    #[test]
    fn record_count_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(10, 7, dir.path(), &quick_params()).unwrap();
        assert_eq!(m.records.len(), 10 * 6 * 140);
        m.check_unique().unwrap();
    }

    #[test]
    fn three_transverse_then_three_sagittal() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(2, 3, dir.path(), &quick_params()).unwrap();
        for r in &m.records {
            let expect =
                if r.sweep_id < 3 { SweepAxis::Transverse } else { SweepAxis::Sagittal };
            assert_eq!(r.sweep_axis, expect);
        }
    }

    #[test]
    fn prevalence_calibrated_near_two_point_six_percent() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(50, 11, dir.path(), &quick_params()).unwrap();
        let p = m.prevalence();
        assert!(
            (p - 0.026).abs() <= 0.010,
            "raw prevalence {p:.4} outside 2.6% ± 1.0% absolute"
        );
    }

    #[test]
    fn filtering_raises_prevalence_and_keeps_whole_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(20, 5, dir.path(), &quick_params()).unwrap();
        let f = m.filter_sweeps();
        assert!(f.records.len() < m.records.len(), "some sweeps should drop");
        assert!(f.prevalence() > m.prevalence());
        assert!((0.05..=0.15).contains(&f.prevalence()), "post-filter {}", f.prevalence());
        // sweep-level retention: a kept sweep keeps all 140 frames
        let mut counts = std::collections::HashMap::new();
        for r in &f.records {
            *counts.entry((r.patient_id.clone(), r.sweep_id)).or_insert(0usize) += 1;
        }
        assert!(counts.values().all(|&c| c == FRAMES_PER_SWEEP));
        // retained records byte-identical to their originals
        for r in f.records.iter().take(500) {
            let orig = m
                .records
                .iter()
                .find(|o| o.patient_id == r.patient_id && o.sweep_id == r.sweep_id && o.frame_index == r.frame_index)
                .unwrap();
            assert_eq!(orig, r);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let params = GeneratorParams { write_files: true, ..Default::default() };
        let m1 = generate_dataset(1, 99, d1.path(), &params).unwrap();
        let m2 = generate_dataset(1, 99, d2.path(), &params).unwrap();
        assert_eq!(m1.records, m2.records);
        // compare a handful of image files byte for byte
        for r in m1.records.iter().step_by(97) {
            let a = std::fs::read(d1.path().join(&r.image_path)).unwrap();
            let b = std::fs::read(d2.path().join(&r.image_path)).unwrap();
            assert_eq!(a, b, "image bytes differ for {}", r.image_path);
        }
        let ma = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn labels_match_mask_content() {
        let dir = tempfile::tempdir().unwrap();
        let params = GeneratorParams { write_files: true, ..Default::default() };
        let m = generate_dataset(2, 13, dir.path(), &params).unwrap();
        for r in &m.records {
            let (_, _, mask) = super::super::pgm::read_pgm(&dir.path().join(&r.mask_path)).unwrap();
            let has_fg = mask.iter().any(|&v| v != 0);
            assert_eq!(r.label == 1, has_fg, "label mismatch at {}", r.mask_path);
            assert!(mask.iter().all(|&v| v == 0 || v == 255), "mask not strictly binary");
        }
    }

    #[test]
    fn positive_windows_are_contiguous_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(8, 21, dir.path(), &quick_params()).unwrap();
        let mut by_sweep: std::collections::HashMap<(String, u8), Vec<u16>> =
            std::collections::HashMap::new();
        for r in &m.records {
            if r.label == 1 {
                by_sweep.entry((r.patient_id.clone(), r.sweep_id)).or_default().push(r.frame_index);
            }
        }
        let params = quick_params();
        for ((pid, sweep), mut frames) in by_sweep {
            frames.sort_unstable();
            let len = frames.len();
            assert!(
                (params.window_min..=params.window_max).contains(&len),
                "{pid}/s{sweep}: window length {len}"
            );
            for w in frames.windows(2) {
                assert_eq!(w[1], w[0] + 1, "{pid}/s{sweep}: window not contiguous");
            }
        }
    }
}
