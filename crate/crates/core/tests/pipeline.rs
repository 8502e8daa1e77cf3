use selguide_core::denoiser::{DiagonalGaussianModel, GaussianDenoiser, GaussianMixtureModel, GmmDenoiser};
use selguide_core::io::{load_image, load_mask, load_parsing_map, load_tensor, save_image, save_mask, save_parsing_map, save_tensor};
use selguide_core::guidance::Stage;
use selguide_core::sampler::{parse_trace, restore, trace_table, GuidanceConfig, Phase};
use selguide_core::{BinaryMask, Image, Image32, ParsingMap, Schedule, Schedule32};

fn scene() -> (Image, BinaryMask, ParsingMap) {
    let y0 = Image::from_fn(3, 10, 10, |c, i, j| ((c * 4 + i * 2 + j) as f64 * 0.27).sin() * 0.7).unwrap();
    let m = BinaryMask::from_fn(10, 10, |i, j| i == j || i == 5).unwrap();
    let p = ParsingMap::from_fn(10, 10, |i, j| match (i, j) {
        (0..=2, _) => 17,
        (3, 2..=3) | (3, 6..=7) => 4,
        (8, 4..=5) => 11,
        (9, _) => 14,
        _ => 1,
    })
    .unwrap();
    (y0, m, p)
}

#[test]
fn files_in_files_out() {
    let dir = tempfile::tempdir().unwrap();
    let (y0, m, p) = scene();
    save_image(&y0, dir.path().join("lq.png")).unwrap();
    save_mask(&m, dir.path().join("m.png")).unwrap();
    save_parsing_map(&p, dir.path().join("p.png")).unwrap();

    let y0: Image = load_image(dir.path().join("lq.png")).unwrap();
    let m = load_mask(dir.path().join("m.png")).unwrap();
    let p = load_parsing_map(dir.path().join("p.png")).unwrap();
    let sched = Schedule::scaled_linear(30).unwrap();
    let cfg = GuidanceConfig { seed: 5, radius: Some(1), ..Default::default() };
    let mut den = GaussianDenoiser::new(DiagonalGaussianModel::standard(3, 10, 10).unwrap());
    let out = restore(&y0, None, &m, &p, &mut den, &sched, &cfg).unwrap();

    save_tensor(&out.image, dir.path().join("out.ssdt")).unwrap();
    let back: Image32 = load_tensor(dir.path().join("out.ssdt")).unwrap();
    assert_eq!(back, out.image.cast::<f32>());

    let text = trace_table(&out.meta, &out.trace).render();
    let (meta, rows) = parse_trace(&text).unwrap();
    assert_eq!(meta, out.meta);
    assert_eq!(rows.len(), 30);
    for (a, b) in rows.iter().zip(&out.trace) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.phase, b.phase);
        for (x, y) in [(a.l1, b.l1), (a.l2, b.l2), (a.l3, b.l3)] {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-300), "{x} vs {y}");
        }
    }
    let stage_two = rows.iter().filter(|r| r.phase == Phase::Guided(Stage::RestorationColor)).count();
    assert_eq!(stage_two, cfg.stage_boundary(30));
}

#[test]
fn single_and_double_precision_agree() {
    let (y0, m, p) = scene();
    let mean = Image::from_fn(3, 10, 10, |c, i, _| 0.1 * c as f64 - 0.02 * i as f64).unwrap();
    let var = Image::filled(3, 10, 10, 0.4).unwrap();
    let comps = vec![
        (0.6, DiagonalGaussianModel::new(mean.clone(), var.clone()).unwrap()),
        (0.4, DiagonalGaussianModel::new(mean.scale(-1.0), var).unwrap()),
    ];
    let cfg = GuidanceConfig { seed: 8, radius: Some(1), ..Default::default() };

    let sched = Schedule::scaled_linear(25).unwrap();
    let mut den = GmmDenoiser::new(GaussianMixtureModel::new(comps.clone()).unwrap());
    let a = restore(&y0, None, &m, &p, &mut den, &sched, &cfg).unwrap();

    let comps32 = comps
        .into_iter()
        .map(|(w, c)| (w, DiagonalGaussianModel::new(c.mean().cast(), c.var().cast()).unwrap()))
        .collect();
    let sched32 = Schedule32::scaled_linear(25).unwrap();
    let mut den32 = GmmDenoiser::new(GaussianMixtureModel::new(comps32).unwrap());
    let b = restore(&y0.cast::<f32>(), None, &m, &p, &mut den32, &sched32, &cfg).unwrap();

    let worst = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(x, y)| (x - f64::from(*y)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "f32 and f64 runs diverge by {worst}");
}
