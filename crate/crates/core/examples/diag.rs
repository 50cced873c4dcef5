//! Scratch diagnostic: residual scales across segments for one pair.

use fleet_align::data::Window;
use fleet_align::fleet::*;
use fleet_align::trainer::*;

fn pct(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = p / 100.0 * (v.len() - 1) as f64;
    v[r.round() as usize]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = ArchitectureKind::parse(&args[1]).unwrap();
    let source_id = args.get(2).cloned().unwrap_or("unit05".into());
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(50);

    let mut fc = SyntheticFleetConfig::default();
    fc.seasonal_amplitude = 1.8;
    fc.fast_amplitude = 1.2;
    fc.fault.magnitude = 2.5;
    fc.noise_scale = 0.1;
    let (fleet, meta) = generate_fleet::<f64>(&fc).unwrap();
    let mut template = ArchitectureSpec::new(kind);
    template.epochs = epochs;
    template.batch_size = 256;
    template.learning_rate = lr;
    let mut cfg = SweepConfig::new(vec![kind], template);
    cfg.target_train_window = Window::Rows(1333);
    cfg.blackout = Window::Rows(667);

    let (t_info, t_ds) = fleet.unit("unit00").unwrap();
    let (_, s_ds) = fleet.unit(&source_id).unwrap();
    let t_idx: usize = 0;
    let s_idx: usize = fleet
        .units
        .iter()
        .position(|(i, _)| i.unit_id == source_id)
        .unwrap();
    println!(
        "regime distance unit00 <-> {}: {:.3}",
        source_id,
        regime_distance(&meta.units[t_idx], &meta.units[s_idx])
    );

    let (model, eval) =
        run_pair_model(s_ds, t_ds, t_info.detection, kind, &cfg, 42).unwrap();
    println!("threshold = {:.6e}", model.threshold.value);
    println!("eval: {:?}", eval);

    // feature-space geometry: domain offset and test extrapolation
    {
        use fleet_align::data::{apply_normalization, clean, fit_normalization, split_dataset, SplitSpec};
        let prep = |ds: &fleet_align::data::UnitDataset<f64>, window: usize, det| {
            let cleaned = clean(ds).unwrap();
            let spec = SplitSpec {
                train_window: Window::Rows(window),
                validation_fraction: 0.06,
                blackout: Window::Rows(667),
                detection_time: det,
            };
            let splits = split_dataset(&cleaned, &spec).unwrap();
            let params = fit_normalization(&splits.train).unwrap();
            let f = |d: &fleet_align::data::UnitDataset<f64>| {
                if d.nrows() == 0 { None } else {
                    Some(model.features(&apply_normalization(d, &params).unwrap().to_tensor().unwrap()).unwrap())
                }
            };
            (f(&splits.train), f(&splits.validation), f(&splits.healthy_test))
        };
        let (ft_train, ft_val, ft_test) = prep(t_ds, 1333, t_info.detection);
        let s_clean_rows = fleet_align::data::clean(s_ds).unwrap().nrows();
        let (fs_train, _, _) = prep(s_ds, s_clean_rows, None);
        let (ft_train, ft_val, ft_test, fs_train) =
            (ft_train.unwrap(), ft_val.unwrap(), ft_test.unwrap(), fs_train.unwrap());
        let centroid = |t: &fleet_align::Tensor64| -> Vec<f64> {
            let (n, d) = (t.nrows(), t.ncols());
            let mut c = vec![0.0; d];
            for i in 0..n { for j in 0..d { c[j] += t.row(i)[j]; } }
            c.iter().map(|v| v / n as f64).collect()
        };
        let spread = |t: &fleet_align::Tensor64| -> f64 {
            let c = centroid(t);
            (0..t.nrows()).map(|i| {
                t.row(i).iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }).sum::<f64>() / t.nrows() as f64
        };
        let ct = centroid(&ft_train);
        let cs = centroid(&fs_train);
        let offset: f64 = ct.iter().zip(&cs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        println!(
            "feature offset ‖c_t − c_s‖ = {:.4}, spreads t {:.4} s {:.4}",
            offset, spread(&ft_train), spread(&fs_train)
        );
        // nearest-neighbor distance from a segment to the pooled train cloud
        let pooled = fs_train.vstack(&ft_train).unwrap();
        let nn = |t: &fleet_align::Tensor64, step: usize| -> f64 {
            let mut ds: Vec<f64> = (0..t.nrows()).step_by(step).map(|i| {
                (0..pooled.nrows()).step_by(7).map(|p| {
                    t.row(i).iter().zip(pooled.row(p)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                }).fold(f64::MAX, f64::min)
            }).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[ds.len() / 2]
        };
        println!(
            "median NN distance to train cloud: val {:.4e}, healthy-test {:.4e}",
            nn(&ft_val, 1), nn(&ft_test, 11)
        );
    }

    // segment residuals through the frozen pipeline
    use fleet_align::data::{apply_normalization, clean, fit_normalization, split_dataset, SplitSpec};
    let cleaned = clean(t_ds).unwrap();
    let spec = SplitSpec {
        train_window: Window::Rows(1333),
        validation_fraction: 0.06,
        blackout: Window::Rows(667),
        detection_time: t_info.detection,
    };
    let splits = split_dataset(&cleaned, &spec).unwrap();
    let params = fit_normalization(&splits.train).unwrap();
    for (name, seg) in [
        ("t_train", &splits.train),
        ("t_val", &splits.validation),
        ("t_healthy", &splits.healthy_test),
        ("t_faulty", &splits.faulty_test),
    ] {
        let norm = apply_normalization(seg, &params).unwrap();
        let t = norm.to_tensor().unwrap();
        let res = model.residuals(&t).unwrap();
        println!(
            "{name:<10} n={:5} res p50={:.4e} p99={:.4e} max={:.4e}",
            res.len(),
            pct(res.clone(), 50.0),
            pct(res.clone(), 99.0),
            res.iter().cloned().fold(0.0, f64::max)
        );
        // normalized input range sanity
        let mx = t.data().iter().cloned().fold(f64::MIN, f64::max);
        let mn = t.data().iter().cloned().fold(f64::MAX, f64::min);
        println!("{name:<10} input range [{mn:.2}, {mx:.2}]");
    }
}
