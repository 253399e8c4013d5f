use contrast_forge::preference::BRIGHTNESS_ID;
use contrast_forge::splat_render::{load_ply, render};
use contrast_forge::trainer::{run, GuidanceKind, TickKind, TrainConfig, Trainer, PLY_NAME, REPORT_NAME};

const PROMPT: &str = "a slim woman from Japan, wearing a green hoodie, black shorts, white canvas shoes, and a silver watch on the right wrist";

fn mean_brightness(t: &Trainer) -> f64 {
    let cams = t.turntable();
    cams.iter().map(|c| render(t.cloud(), c, t.config().background).unwrap().to_image().mean()).sum::<f64>()
        / cams.len() as f64
}

#[test]
fn brightness_preference_raises_brightness() {
    let cfg = TrainConfig {
        iterations: 50,
        resolution: 32,
        init_splats: 300,
        guidance: GuidanceKind::None,
        scorers: vec![BRIGHTNESS_ID.into()],
        negation: false,
        background: [0.0; 3],
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, PROMPT).unwrap();
    let before = mean_brightness(&t);
    let mut last = before;
    for _ in 0..5 {
        for _ in 0..10 {
            t.step().unwrap();
        }
        let now = mean_brightness(&t);
        assert!(now > last, "brightness {last} -> {now}");
        last = now;
    }
    assert!(last > before);
}

#[test]
fn desk_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { iterations: 30, resolution: 32, init_splats: 200, ..TrainConfig::default() };
    let out = run(cfg, PROMPT, dir.path()).unwrap();
    let ply = load_ply(dir.path().join(PLY_NAME)).unwrap();
    assert_eq!(ply, out.cloud);
    for k in 0..8 {
        let img = contrast_forge::Image::read_png(dir.path().join(format!("turntable_{k:03}.png"))).unwrap();
        assert_eq!(img.shape(), [32, 32, 3]);
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(REPORT_NAME)).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["trace"].as_array().unwrap().len(), 30);
    assert_eq!(report["outputs"].as_array().unwrap().len(), 10);
    assert!(report["negation"]["text"].as_str().unwrap().contains("on the left wrist"));
    assert_eq!(out.report.trace[0].positive_scores.len(), 2);
    assert_eq!(out.report.trace[0].negative_scores.len(), 2);
}

#[test]
fn schedule_fires_on_ticks_and_counts_change_only_there() {
    let cfg = TrainConfig {
        iterations: 3600,
        resolution: 16,
        init_splats: 150,
        guidance: GuidanceKind::Toy,
        preference_weight: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, PROMPT).unwrap();
    t.train().unwrap();
    let report = t.report();
    let ticks: Vec<usize> = report.events.iter().map(|e| e.iteration).collect();
    let expected: Vec<usize> = (300..=2100).step_by(300).chain((2400..=3300).step_by(300)).collect();
    assert_eq!(ticks, expected);
    for e in &report.events {
        let densify = e.iteration <= 2100;
        assert_eq!(e.kind, if densify { TickKind::DensifyAndPrune } else { TickKind::Prune });
        assert_eq!(e.after, e.before + e.split + e.cloned - e.pruned);
        if !densify {
            assert_eq!(e.split + e.cloned, 0);
        }
    }
    assert!(report.events.iter().any(|e| e.split + e.cloned > 0));
    // trace records the count at step start, so changes show up one entry later
    for w in report.trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.splats != a.splats {
            let ev = report.events.iter().find(|e| e.iteration == a.iteration).expect("count changed off-tick");
            assert_eq!((ev.before, ev.after), (a.splats, b.splats));
        }
    }
    assert_eq!(report.final_splats, t.cloud().len());
}
