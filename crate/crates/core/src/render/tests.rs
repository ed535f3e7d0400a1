use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::volume::{synth_volume, SynthSpec};

fn cam(w: usize, h: usize) -> Camera {
    Camera {
        eye: [0.0, 0.0, 4.0],
        look_at: [0.0; 3],
        up: [0.0, 1.0, 0.0],
        fov: 35.0,
        width: w,
        height: h,
    }
}

fn flat_tf(rgb: [f64; 3], alpha: f64) -> TransferFunction {
    TransferFunction::new(
        vec![ColorPoint { x: 0.0, rgb }],
        vec![OpacityPoint { x: 0.0, alpha }],
        [0.0, 1.0],
    )
    .unwrap()
}

fn clear_bg() -> RenderConfig {
    RenderConfig {
        background: [0.0; 4],
        ..RenderConfig::default()
    }
}

#[test]
fn composite_examples() {
    let cfg = clear_bg();
    let r = cfg.reference_step;
    assert_eq!(composite_ray(&[[0.3, 0.2, 0.1, 0.0]; 5], r, &cfg), [0.0; 4]);
    let grey = RenderConfig {
        background: [0.5, 0.5, 0.5, 1.0],
        ..cfg.clone()
    };
    assert_eq!(composite_ray(&[[0.1, 0.2, 0.3, 0.0]], r, &grey), [0.5, 0.5, 0.5, 1.0]);
    let c = composite_ray(&[[0.2, 0.7, 0.9, 1.0], [1.0, 0.0, 0.0, 0.5]], r, &grey);
    assert_eq!(c, [0.2, 0.7, 0.9, 1.0]);
    let c = composite_ray(&[[1.0, 1.0, 1.0, 0.5], [0.0, 0.0, 0.0, 0.5]], r, &cfg);
    assert!((c[0] - 0.5).abs() < 1e-15 && (c[3] - 0.75).abs() < 1e-15);
}

#[test]
fn opacity_correction() {
    assert!((correct_opacity(0.3, 1.0, 1.0) - 0.3).abs() < 1e-15);
    assert!((correct_opacity(0.3, 2.0, 1.0) - (1.0 - 0.49)).abs() < 1e-15);
    assert_eq!(correct_opacity(1.0, 0.1, 1.0), 1.0);
    assert_eq!(correct_opacity(0.0, 3.0, 1.0), 0.0);
}

#[test]
fn render_config_validation() {
    assert!(RenderConfig::default().validate().is_ok());
    let bad = [
        RenderConfig { samples_per_ray: 0, ..Default::default() },
        RenderConfig { batch_size: 0, ..Default::default() },
        RenderConfig { reference_step: 0.0, ..Default::default() },
        RenderConfig { background: [0.0, 0.0, 2.0, 1.0], ..Default::default() },
    ];
    for b in bad {
        assert!(matches!(b.validate(), Err(Error::RenderConfig(_))));
    }
    let cfg: RenderConfig = serde_json::from_str(r#"{"samples_per_ray":16}"#).unwrap();
    assert_eq!(cfg.batch_size, RenderConfig::default().batch_size);
}

#[test]
fn missing_camera_gives_background() {
    let vol = Volume::constant([4; 3], 1.0).unwrap();
    let c = Camera { eye: [5.0, 5.0, 5.0], look_at: [9.0, 5.0, 5.0], ..cam(6, 5) };
    let cfg = RenderConfig { background: [0.1, 0.2, 0.3, 1.0], ..Default::default() };
    let img = render_frame(&vol, &c, &TransferFunction::default(), &cfg).unwrap();
    assert!(img.pixels.iter().all(|p| *p == [0.1, 0.2, 0.3, 1.0]));
}

#[test]
fn constant_field_matches_closed_form() {
    let vol = Volume::constant([8; 3], 3.0).unwrap();
    let c = cam(24, 20);
    let rgb = [0.2, 0.5, 0.9];
    let tf = flat_tf(rgb, 0.04);
    let cfg = RenderConfig { samples_per_ray: 50, early_exit: 2.0, ..clear_bg() };
    let img = render_frame(&vol, &c, &tf, &cfg).unwrap();
    let mut hits = 0;
    for y in 0..c.height {
        for x in 0..c.width {
            let r = c.ray(x, y);
            let p = img.get(x, y);
            if !r.hit {
                assert_eq!(p, [0.0; 4]);
                continue;
            }
            hits += 1;
            let step = (r.t_exit - r.t_enter) / 50.0;
            let a = 1.0 - 0.96f64.powf(step / cfg.reference_step);
            let total = 1.0 - (1.0 - a).powi(50);
            for ch in 0..3 {
                assert!((p[ch] as f64 - rgb[ch] * total).abs() < 1e-3);
            }
            assert!((p[3] as f64 - total).abs() < 1e-3);
        }
    }
    assert!(hits > 100);
}

#[test]
fn early_exit_stays_within_residual() {
    let vol = synth_volume(&SynthSpec::one_blob(16)).unwrap();
    let tf = TransferFunction::default();
    let mut cfg = RenderConfig { samples_per_ray: 96, ..Default::default() };
    let on = render_frame(&vol, &cam(20, 20), &tf, &cfg).unwrap();
    cfg.early_exit = 2.0;
    let off = render_frame(&vol, &cam(20, 20), &tf, &cfg).unwrap();
    for (a, b) in on.pixels.iter().zip(&off.pixels) {
        for ch in 0..4 {
            assert!((a[ch] - b[ch]).abs() <= 0.01);
        }
    }
    let dense = flat_tf([1.0, 1.0, 1.0], 0.5);
    let img = render_frame(&vol, &cam(4, 4), &dense, &RenderConfig::default()).unwrap();
    assert!(img.pixels.iter().all(|p| p[3] >= 0.99 && p[3] <= 1.0));
}

#[test]
fn batch_size_never_changes_pixels() {
    let vol = synth_volume(&SynthSpec::two_blob(12)).unwrap();
    let mut model = ApmgModel::<f32>::init(&ModelConfig::new(3, 2, [4, 4, 4]), 5).unwrap();
    model.set_range(vol.vmin(), vol.vmax());
    let tf = TransferFunction::default();
    let c = Camera { eye: [1.7, 1.1, 2.6], ..cam(17, 13) };
    for field in [&vol as &dyn Field, &model] {
        let base = render_frame(field, &c, &tf, &RenderConfig { samples_per_ray: 40, ..Default::default() }).unwrap();
        for bs in [1, 7, 333, 1 << 20] {
            let cfg = RenderConfig { samples_per_ray: 40, batch_size: bs, ..Default::default() };
            assert_eq!(render_frame(field, &c, &tf, &cfg).unwrap(), base);
        }
    }
}

#[test]
fn pixel_subsets_match_full_frame() {
    let vol = synth_volume(&SynthSpec::one_blob(10)).unwrap();
    let c = cam(9, 7);
    let tf = TransferFunction::default();
    let cfg = RenderConfig { samples_per_ray: 30, ..Default::default() };
    let full = render_frame(&vol, &c, &tf, &cfg).unwrap();
    let subset = [62, 0, 31, 5];
    let part = render_pixels(&vol, &c, &tf, &cfg, &subset).unwrap();
    for (&p, v) in subset.iter().zip(part) {
        assert_eq!(full.pixels[p], v);
    }
    assert!(render_pixels(&vol, &c, &tf, &cfg, &[63]).is_err());
}

#[test]
fn schedule_examples() {
    let s = progressive_schedule(1, 1);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].pixels, vec![0]);
    let sizes: Vec<usize> = progressive_schedule(4, 4).iter().map(|p| p.pixels.len()).collect();
    assert_eq!(sizes, vec![1, 3, 12]);
    let s = progressive_schedule(4, 4);
    assert_eq!(s[1].pixels, vec![2, 8, 10]);
    assert_eq!(s.iter().map(|p| p.stride).collect::<Vec<_>>(), vec![4, 2, 1]);
}

proptest! {
    #[test]
    fn schedule_is_a_permutation(w in 1usize..40, h in 1usize..40) {
        let mut all: Vec<usize> = progressive_schedule(w, h).into_iter().flat_map(|p| p.pixels).collect();
        prop_assert_eq!(all.len(), w * h);
        all.sort_unstable();
        prop_assert!(all.iter().enumerate().all(|(i, &p)| i == p));
    }

    #[test]
    fn composite_stays_in_bounds(
        samples in prop::collection::vec(prop::array::uniform4(0.0f64..=1.0), 0..20),
        bg in prop::array::uniform4(0.0f64..=1.0),
        step in 0.001f64..0.1,
    ) {
        let cfg = RenderConfig { background: bg, ..Default::default() };
        let out = composite_ray(&samples, step, &cfg);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&out[3]));
        if out[3] > 1e-9 {
            for ch in 0..3 {
                let colors = samples.iter().map(|s| s[ch]).chain(std::iter::once(bg[ch]));
                let (lo, hi) = colors.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| (l.min(c), h.max(c)));
                let straight = out[ch] / out[3];
                prop_assert!(straight >= lo - 1e-9 && straight <= hi + 1e-9);
            }
        }
    }
}

#[test]
fn progressive_final_equals_direct_render() {
    let vol = synth_volume(&SynthSpec::two_blob(12)).unwrap();
    let tf = TransferFunction::default();
    let cfg = RenderConfig { samples_per_ray: 48, batch_size: 100, ..Default::default() };
    let c = Camera { eye: [2.0, -1.0, 2.5], ..cam(23, 14) };
    let direct = render_frame(&vol, &c, &tf, &cfg).unwrap();
    let mut levels = Vec::new();
    let fin = render_progressive(&vol, &c, &tf, &cfg, &|| false, |f| {
        levels.push(f.level);
        assert_eq!((f.preview.width, f.preview.height), (23, 14));
        Ok(())
    })
    .unwrap()
    .unwrap();
    assert_eq!(fin, direct);
    assert_eq!(levels, (0..=5).collect::<Vec<_>>());
}

#[test]
fn progressive_preview_upscales_coarse_level() {
    let mut img = Image::filled(5, 5, [0.0; 4]);
    img.pixels[0] = [1.0; 4];
    img.pixels[4] = [0.0, 0.0, 0.0, 1.0];
    let up = upscale_bilinear(&img, 4);
    assert_eq!(up.get(2, 0), [0.5, 0.5, 0.5, 1.0]);
    assert_eq!(up.get(0, 3), [0.25; 4]);
    assert_eq!(up.get(0, 4), img.get(0, 4));
    assert_eq!(upscale_bilinear(&img, 1), img);
}

#[test]
fn progressive_cancellation() {
    let vol = Volume::constant([4; 3], 1.0).unwrap();
    let passes = std::cell::Cell::new(0);
    let out = render_progressive(
        &vol,
        &cam(16, 16),
        &TransferFunction::default(),
        &RenderConfig::default(),
        &|| passes.get() >= 2,
        |_| {
            passes.set(passes.get() + 1);
            Ok(())
        },
    )
    .unwrap();
    assert!(out.is_none());
    assert_eq!(passes.get(), 2);
}

#[test]
fn image_byte_formats() {
    let img = Image {
        width: 2,
        height: 1,
        pixels: vec![[0.25, 0.5, 0.0, 0.5], [0.0, 0.0, 0.0, 0.0]],
    };
    assert_eq!(img.to_rgba8(), vec![128, 255, 0, 128, 0, 0, 0, 0]);
    let bytes = img.to_f32_bytes();
    assert_eq!(bytes.len(), 32);
    assert_eq!(Image::from_f32_bytes(2, 1, &bytes).unwrap(), img);
    assert!(Image::from_f32_bytes(3, 1, &bytes).is_err());
}
