//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use csmpq::allocator::{
    bops, brute_force_allocation, importance, model_size, solve_lp, uniform_config, BitRange, Budget, LayerProfile,
    BYTES_PER_MB,
};
use csmpq::feature_store::read_container;
use csmpq::pipeline::{self, pin_layers, run_pipeline, BudgetSpec, PipelineConfig};
use csmpq::quantsim::{layer_mse, quantize_dequantize, ModelGraph};
use csmpq::report::ProfileFile;
use csmpq::separability::{score_layer, select_words, PooledFeatures};
use csmpq::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and bounds, fixed up front.
/// 2 * (1/3) * ln(3/2) / 4, hand-chained through word selection, TF, IDF and
/// normalization. The 7-digit rounding quoted alongside it is 0.0675776.
const MICRO_ALPHA: f64 = 0.067_577_518_018_027;
const MICRO_ALPHA_ROUNDED: f64 = 0.0675776;
const MICRO_TOL: f64 = 1e-9;
const MICRO_TIME: Duration = Duration::from_secs(1);
const SCALE_INSTANCES: usize = 100;
const SCALE_RTOL: f64 = 1e-9;
const PERM_INSTANCES: usize = 100;
const PERM_TOL: f64 = 1e-12;
const LP_INSTANCES: usize = 250;
const LP_MAX_FREE: usize = 6;
const LP_TIME: Duration = Duration::from_secs(30);
/// Float slack for comparing objectives computed along different paths.
const OBJ_RTOL: f64 = 1e-12;
const TABLE_RTOL: f64 = 0.01;
const QUANT_TENSORS: usize = 1000;
const QUANT_BOUND_TOL: f64 = 1e-9;
const PIPELINE_TIME: Duration = Duration::from_secs(60);
const PIPELINE_SEED: u64 = 42;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

type Outcome = Result<String, String>;

fn micro_example() -> Outcome {
    let start = Instant::now();
    let p = PooledFeatures::from_rows("micro", &[vec![1.0, 2.0], vec![1.0, 2.0], vec![4.0, 2.0]]).unwrap();
    let alpha = score_layer(&p).alpha;
    // Independent chain: word sets {1},{1},{0,1}; TF-IDF mass 2 * (1/3) * ln(3/2) over 4 words.
    let oracle = 2.0 * (1.0 / 3.0) * (3.0f64 / 2.0).ln() / 4.0;
    let elapsed = start.elapsed();
    let ok = (alpha - MICRO_ALPHA).abs() <= MICRO_TOL
        && (alpha - oracle).abs() <= MICRO_TOL
        && (alpha - MICRO_ALPHA_ROUNDED).abs() <= 1e-7
        && elapsed < MICRO_TIME;
    let msg = format!(
        "alpha={alpha:.12} |alpha - {MICRO_ALPHA}|={:.1e} |alpha - oracle|={:.1e} in {elapsed:?}",
        (alpha - MICRO_ALPHA).abs(),
        (alpha - oracle).abs()
    );
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_features(rng: &mut ChaCha8Rng) -> PooledFeatures {
    let c_out = rng.random_range(1..=24);
    let n = rng.random_range(1..=32);
    let rows: Vec<Vec<f64>> = (0..c_out)
        .map(|_| (0..n).map(|_| rng.random_range(0.05..2.0)).collect())
        .collect();
    PooledFeatures::from_rows("rand", &rows).unwrap()
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for k in 0..SCALE_INSTANCES {
        let p = random_features(&mut rng);
        let j = rng.random_range(0..p.n_images());
        let c = 10f64.powf(rng.random_range(-1.0..1.0));
        let a = score_layer(&p).alpha;
        let b = score_layer(&p.scale_image(j, c)).alpha;
        let rel = if a == 0.0 { b.abs() } else { ((a - b) / a).abs() };
        worst = worst.max(rel);
        if rel >= SCALE_RTOL {
            return Err(format!("instance {k}: alpha {a} -> {b} (rel {rel:e}) under c={c}"));
        }
    }
    Ok(format!("{SCALE_INSTANCES} instances, worst relative change {worst:e}"))
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..PERM_INSTANCES {
        let p = random_features(&mut rng);
        let fo = shuffled(&mut rng, p.c_out());
        let io = shuffled(&mut rng, p.n_images());
        let q = p.permute_features(&fo).permute_images(&io);
        let (wp, wq) = (select_words(&p), select_words(&q));
        // Map every word of q back to original coordinates.
        let mut back: Vec<(usize, usize)> = (0..q.c_out())
            .flat_map(|i| wq.set(i).into_iter().map(move |j| (i, j)))
            .map(|(i, j)| (fo[i], io[j]))
            .collect();
        let mut orig: Vec<(usize, usize)> = (0..p.c_out())
            .flat_map(|i| wp.set(i).into_iter().map(move |j| (i, j)))
            .collect();
        back.sort_unstable();
        orig.sort_unstable();
        if back != orig {
            return Err(format!("instance {k}: word sets differ under permutation"));
        }
        let (a, b) = (score_layer(&p).alpha, score_layer(&q).alpha);
        worst = worst.max((a - b).abs());
        if (a - b).abs() > PERM_TOL {
            return Err(format!("instance {k}: alpha {a} vs {b}"));
        }
    }
    Ok(format!("{PERM_INSTANCES} instances, word sets equal, worst |d alpha| {worst:e}"))
}

fn lp_sandwich() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_gap_ratio = 0.0f64;
    let mut solved = 0;
    let mut attempts = 0;
    while solved < LP_INSTANCES {
        attempts += 1;
        let free = rng.random_range(1..=LP_MAX_FREE);
        let pinned = rng.random_range(0..=2);
        let lo = rng.random_range(2..=8);
        let hi = rng.random_range(lo..=8);
        let range = BitRange::new(lo, hi).unwrap();
        let mut profiles: Vec<LayerProfile> = (0..free + pinned)
            .map(|i| LayerProfile {
                layer_id: format!("l{i}"),
                param_count: rng.random_range(1..5000),
                mac_count: rng.random_range(0..100_000),
                pinned_bits: None,
            })
            .collect();
        for p in profiles.iter_mut().take(pinned) {
            p.pinned_bits = Some(8);
        }
        let alpha: Vec<f64> = profiles.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let theta = importance(&alpha, rng.random_range(0.0..4.0)).unwrap();
        let act = rng.random_range(2..=8);
        let use_bops = rng.random_bool(0.3);
        let lo_cfg: Vec<u32> = profiles.iter().map(|p| p.pinned_bits.unwrap_or(lo)).collect();
        let hi_cfg: Vec<u32> = profiles.iter().map(|p| p.pinned_bits.unwrap_or(hi)).collect();
        let (min_cost, max_cost) = if use_bops {
            (bops(&lo_cfg, &profiles, act), bops(&hi_cfg, &profiles, act))
        } else {
            (model_size(&lo_cfg, &profiles), model_size(&hi_cfg, &profiles))
        };
        if min_cost == 0.0 && max_cost == 0.0 {
            continue;
        }
        let limit = min_cost + rng.random_range(0.0..1.1) * (max_cost - min_cost);
        if limit <= 0.0 {
            continue;
        }
        let budget = if use_bops { Budget::bops(limit, act) } else { Budget::size_bytes(limit, act) };

        let lp = solve_lp(&theta, &profiles, &budget, range).map_err(|e| format!("solve_lp: {e}"))?;
        let bf = brute_force_allocation(&theta, &profiles, &budget, range).map_err(|e| format!("brute force: {e}"))?;
        let scale = lp.relaxed_objective.abs().max(1.0);
        let max_theta = theta.theta.iter().cloned().fold(0.0, f64::max);
        let checks = [
            (lp.relaxed_objective + OBJ_RTOL * scale >= bf.objective, "relaxed >= brute force"),
            (bf.objective >= lp.objective, "brute force >= floored"),
            (lp.relaxed_objective - lp.objective <= max_theta + OBJ_RTOL * scale, "gap <= max theta"),
            (lp.feasible && budget.admits(budget.cost(&lp.bits, &profiles)), "LP config within budget"),
            (bf.feasible, "oracle config within budget"),
        ];
        if let Some((_, what)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(format!(
                "instance {solved}: {what} failed (relaxed {}, brute {}, floored {}, bits {:?} vs {:?})",
                lp.relaxed_objective, bf.objective, lp.objective, lp.bits, bf.bits
            ));
        }
        max_gap_ratio = max_gap_ratio.max((lp.relaxed_objective - lp.objective) / max_theta);
        solved += 1;
    }
    let elapsed = start.elapsed();
    if elapsed >= LP_TIME {
        return Err(format!("{solved} instances took {elapsed:?}"));
    }
    Ok(format!(
        "{solved} instances ({attempts} drawn), max gap / max theta {max_gap_ratio:.4}, {elapsed:?}"
    ))
}

/// Weight and MAC counts of every conv/fc layer in ResNet-18 (224x224 input).
fn resnet18_profile() -> Vec<LayerProfile> {
    // (name, out_c, in_c, kernel, output side)
    let mut convs: Vec<(String, u64, u64, u64, u64)> = vec![("conv1".into(), 64, 3, 7, 112)];
    let stages = [(64u64, 56u64), (128, 28), (256, 14), (512, 7)];
    let mut in_c = 64;
    for (s, &(c, side)) in stages.iter().enumerate() {
        for block in 0..2 {
            let first_in = if block == 0 { in_c } else { c };
            convs.push((format!("layer{}.{block}.conv1", s + 1), c, first_in, 3, side));
            convs.push((format!("layer{}.{block}.conv2", s + 1), c, c, 3, side));
            if block == 0 && s > 0 {
                convs.push((format!("layer{}.0.downsample", s + 1), c, in_c, 1, side));
            }
        }
        in_c = c;
    }
    let mut out: Vec<LayerProfile> = convs
        .into_iter()
        .map(|(name, o, i, k, side)| LayerProfile {
            layer_id: name,
            param_count: o * i * k * k,
            mac_count: o * i * k * k * side * side,
            pinned_bits: None,
        })
        .collect();
    out.push(LayerProfile {
        layer_id: "fc".into(),
        param_count: 512 * 1000,
        mac_count: 512 * 1000,
        pinned_bits: None,
    });
    out
}

fn table_arithmetic() -> Outcome {
    let profile = resnet18_profile();
    let uniform = |b: u32| vec![b; profile.len()];
    let size32_mb = model_size(&uniform(32), &profile) / BYTES_PER_MB;
    let bops32_g = bops(&uniform(32), &profile, 32) / 1e9;
    let size8_mb = model_size(&uniform(8), &profile) / BYTES_PER_MB;
    let bops8_g = bops(&uniform(8), &profile, 8) / 1e9;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let rows = [
        ("32-bit size vs 44.6 MB", size32_mb, 44.6),
        ("W32A32 BOPs vs 1858 G", bops32_g, 1858.0),
        ("W8 size vs 11.1 MB", size8_mb, 11.1),
        ("W8A8 BOPs vs 116 G", bops8_g, 116.0),
    ];
    let msg = rows
        .iter()
        .map(|(what, got, want)| format!("{what}: {got:.3} ({:.2}%)", 100.0 * rel(*got, *want)))
        .collect::<Vec<_>>()
        .join("; ");
    if rows.iter().all(|(_, got, want)| rel(*got, *want) <= TABLE_RTOL) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn quantizer_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..QUANT_TENSORS {
        let n = rng.random_range(1..=128);
        let spread = 10f64.powf(rng.random_range(-3.0..2.0));
        let data: Vec<f32> = (0..n).map(|_| (rng.random_range(-1.0..1.0) * spread) as f32).collect();
        let w = Tensor::new("w", vec![n], data).unwrap();
        for bits in 2..=8 {
            let (deq, q) = quantize_dequantize(&w, bits).unwrap();
            let (again, _) = quantize_dequantize(&deq, bits).unwrap();
            if !again.bit_eq(&deq) {
                return Err(format!("tensor {k}, {bits} bits: not idempotent"));
            }
            let qmax = q.qmax();
            for ((&orig, code), &stored) in w.data().iter().zip(q.dequantize_f64()).zip(deq.data()) {
                let err = (code - orig as f64).abs();
                worst_excess = worst_excess.max(err - q.scale / 2.0);
                if err > q.scale / 2.0 + QUANT_BOUND_TOL {
                    return Err(format!("tensor {k}, {bits} bits: error {err} > scale/2 {}", q.scale / 2.0));
                }
                // The f32 copy adds at most its own rounding.
                let stored_bound = q.scale / 2.0 + f32::EPSILON as f64 * (qmax as f64 * q.scale);
                if (stored as f64 - orig as f64).abs() > stored_bound {
                    return Err(format!("tensor {k}, {bits} bits: stored error exceeds bound"));
                }
            }
        }
    }

    let model = ModelGraph::load(fixtures().join("model.json")).map_err(|e| e.to_string())?;
    let mut curves = Vec::new();
    for idx in model.quantizable() {
        let w = model.layers[idx].weight().unwrap();
        let mse: Vec<f64> = (2..=8)
            .map(|b| layer_mse(w, &quantize_dequantize(w, b).unwrap().0).unwrap())
            .collect();
        if mse.windows(2).any(|p| p[1] > p[0]) {
            return Err(format!("layer {}: MSE not non-increasing in bits: {mse:?}", w.name()));
        }
        curves.push(format!("{}: {:.2e}..{:.2e}", model.layers[idx].label(), mse[0], mse[6]));
    }
    Ok(format!(
        "{QUANT_TENSORS} tensors x bits 2..8 idempotent, max (err - scale/2) {worst_excess:.2e}; fixture MSE 2->8 bits {}",
        curves.join(", ")
    ))
}

fn fixture_budget_mb(fraction: f64) -> f64 {
    let profile: ProfileFile = csmpq::report::read_json(fixtures().join("profile.json")).unwrap();
    let eight = vec![8; profile.layers.len()];
    fraction * model_size(&eight, &profile.layers) / BYTES_PER_MB
}

fn end_to_end_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let start = Instant::now();
    for d in &dirs {
        let mut cfg = PipelineConfig::new(
            fixtures().join("model.json"),
            fixtures().join("dataset.fmap"),
            d.path().to_path_buf(),
            BudgetSpec::Megabytes(fixture_budget_mb(0.6)),
        );
        cfg.seed = PIPELINE_SEED;
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
    }
    let per_run = start.elapsed() / 2;
    let files = [
        pipeline::FEATURES_FILE,
        pipeline::PROFILE_FILE,
        pipeline::SCORES_FILE,
        pipeline::ALLOCATION_FILE,
        pipeline::EVAL_FILE,
    ];
    for f in files {
        let a = fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    if per_run >= PIPELINE_TIME {
        return Err(format!("pipeline took {per_run:?}"));
    }
    Ok(format!("{} artifacts byte-identical, {per_run:?} per run", files.len()))
}

fn dominance() -> Outcome {
    let (tensors, meta) = read_container(fixtures().join("features.fmap")).map_err(|e| e.to_string())?;
    let scores = pipeline::analyze(&tensors, &meta).map_err(|e| e.to_string())?;
    let profile: ProfileFile = csmpq::report::read_json(fixtures().join("profile.json")).map_err(|e| e.to_string())?;
    let alpha: Vec<f64> = profile.layers.iter().map(|p| scores.alpha(&p.layer_id).unwrap()).collect();
    let pinned = pin_layers(&profile.layers, true, &[]).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for beta in [0.0, 1.0, 10.0, 50.0] {
        let theta = importance(&alpha, beta).unwrap();
        for (range, fractions) in [
            (BitRange::new(4, 8).unwrap(), [0.55, 0.6, 0.75, 0.9, 1.0]),
            (BitRange::new(2, 4).unwrap(), [0.35, 0.4, 0.45, 0.5, 0.6]),
        ] {
            for frac in fractions {
                let budget = Budget::size_mb(fixture_budget_mb(frac), 8);
                let lp = match solve_lp(&theta, &pinned, &budget, range) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                for b in range.min..=range.max {
                    let u = uniform_config(b, &theta, &pinned, &budget);
                    if !u.feasible {
                        continue;
                    }
                    checked += 1;
                    if lp.relaxed_objective + OBJ_RTOL * lp.relaxed_objective < u.objective {
                        return Err(format!(
                            "beta {beta}, {frac} budget: relaxed {} < uniform {b}-bit {}",
                            lp.relaxed_objective, u.objective
                        ));
                    }
                }
            }
        }
    }
    if checked == 0 {
        return Err("no feasible uniform configuration was compared".into());
    }
    Ok(format!("{checked} feasible uniform configurations dominated"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("worked micro-example alpha", micro_example),
        ("scale invariance", scale_invariance),
        ("permutation invariance", permutation_invariance),
        ("LP oracle sandwich", lp_sandwich),
        ("table arithmetic (ResNet-18 size/BOPs)", table_arithmetic),
        ("quantizer contracts", quantizer_contracts),
        ("end-to-end determinism", end_to_end_determinism),
        ("LP dominance over uniform configs", dominance),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
