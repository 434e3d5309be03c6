//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use flowattack::attack::{
    loss_attack, loss_consistency, loss_gradient, loss_total, noisy_reference, run_attack, AttackConfig,
    AttackSetting,
};
use flowattack::defense::{assess_perturbed, DefenseMethod, Downstream};
use flowattack::diffcore::Field2D;
use flowattack::experiment::{cmd_attack, ExperimentConfig, RunOptions, SceneSource};
use flowattack::flowio::{decode_flo, encode_flo, flow_to_color, kitti_quantize, read_kitti_png, write_kitti_png};
use flowattack::flowmodel::{estimate_flow, model_family, FlowModelParams};
use flowattack::metrics::{epe_masked, perturbation_norms};
use flowattack::scenegen::{render, scene_suite, SceneInstance, SceneSpec, SpriteShape, SpriteSpec};
use flowattack::stats::{sign_test_less, spearman_negative};
use flowattack::ttc::{ttc_error, ttc_from_flow};
use flowattack::types::{Category, FlowField, Image, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SUITE: usize = 20;
const ALPHA_CONSISTENT: f64 = 10.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn suite() -> Vec<SceneInstance> {
    scene_suite(SUITE, 0)
        .unwrap()
        .iter()
        .map(|s| render(s).unwrap())
        .collect()
}

fn global(alpha: f64) -> AttackConfig {
    AttackConfig {
        alpha,
        setting: AttackSetting::Global,
        ..Default::default()
    }
}

/// Per-scene outcome of one attack.
#[derive(Clone, Copy, Debug)]
struct Run {
    on: f64,
    off: f64,
    converged: bool,
    final_mean: f64,
    out_of_mask_max: f64,
    max_value: f64,
    min_value: f64,
}

fn run_suite(scenes: &[SceneInstance], cfg: &AttackConfig, params: &FlowModelParams) -> Vec<Run> {
    scenes
        .par_iter()
        .map(|s| {
            let r = run_attack(&s.i1, &s.i2, &s.labels, cfg, params).unwrap();
            let norms = perturbation_norms(&r.perturbed_image, &s.i1, &r.masks.perturb).unwrap();
            let values = r.perturbed_image.channels().iter().flat_map(|c| c.data().to_vec()).collect::<Vec<_>>();
            Run {
                on: epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target).unwrap(),
                off: epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target.complement()).unwrap(),
                converged: r.converged,
                final_mean: r.final_mean_abs_perturbation,
                out_of_mask_max: norms.out_of_mask_max,
                max_value: values.iter().cloned().fold(f64::MIN, f64::max),
                min_value: values.iter().cloned().fold(f64::MAX, f64::min),
            }
        })
        .collect()
}

fn small_scene(seed: u64) -> SceneInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec {
        width: 16,
        height: 16,
        background_seed: rng.random(),
        background_tint: [0.5, 0.45, 0.55],
        background_motion: (rng.random_range(-0.4..0.4), 0.1),
        horizon: 6,
        sprites: vec![SpriteSpec {
            category: Category::Vehicle,
            shape: SpriteShape::Rectangle,
            center: (7.5 + rng.random_range(-1.0..1.0), 9.5),
            half_size: (3.5, 2.5),
            texture_seed: rng.random(),
            tint: [0.5, 0.5, 0.5],
            translation: (rng.random_range(-0.8..0.8), 0.2),
            scale: 1.05,
        }],
        rng_seed: seed,
    };
    render(&spec).unwrap()
}

fn criterion_1() -> Verdict {
    let params = FlowModelParams {
        pyramid_levels: 2,
        jacobi_iters_per_level: 5,
        ..Default::default()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let s = small_scene(seed);
        let target = s.labels.mask_of(Category::Vehicle);
        let v = estimate_flow(&s.i1, &s.i2, &params).unwrap();
        // Large reference noise keeps every |.| term away from its kink.
        let reference = noisy_reference(&v, 0.05, seed).unwrap();
        let (grads, _) = loss_gradient(&s.i1, &s.i2, &reference, &target, ALPHA_CONSISTENT, &params).unwrap();
        let loss_at = |img: &Image| {
            let f = estimate_flow(img, &s.i2, &params).unwrap();
            loss_total(&f, &reference, &target, ALPHA_CONSISTENT).unwrap()
        };
        let (mut diff2, mut ref2) = (0.0, 0.0);
        for c in 0..3 {
            for i in 0..256 {
                let bump = |d: f64| {
                    let mut ch = s.i1.channels().clone();
                    ch[c].data_mut()[i] += d;
                    Image::new(ch).unwrap()
                };
                let fd = (loss_at(&bump(h)) - loss_at(&bump(-h))) / (2.0 * h);
                diff2 += (grads[c].data()[i] - fd).powi(2);
                ref2 += fd * fd;
            }
        }
        worst = worst.max((diff2 / ref2).sqrt());
    }
    verdict(worst < 1e-3, format!("worst relative gradient error {worst:.2e} (limit 1e-3)"))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut rf = || Field2D::from_fn(8, 8, |_, _| rng.random_range(-3.0..3.0));
        let a = FlowField::new(rf(), rf()).unwrap();
        let b = FlowField::new(rf(), rf()).unwrap();
        let mut bits: Vec<bool> = (0..64).map(|_| rng.random_bool(0.3)).collect();
        bits[0] = true;
        bits[63] = false;
        let mask = Mask::new(8, 8, bits.clone()).unwrap();
        let (mut on, mut n_on, mut off, mut n_off, mut epe) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                let (du, dv) = (a.u.get(y, x) - b.u.get(y, x), a.v.get(y, x) - b.v.get(y, x));
                if bits[y * 8 + x] {
                    on += du.abs() + dv.abs();
                    epe += (du * du + dv * dv).sqrt();
                    n_on += 1.0;
                } else {
                    off += du.abs() + dv.abs();
                    n_off += 1.0;
                }
            }
        }
        worst = worst
            .max((loss_attack(&a, &b, &mask).unwrap() - on / n_on).abs())
            .max((loss_consistency(&a, &b, &mask).unwrap() + off / n_off).abs())
            .max((epe_masked(&a, &b, &mask).unwrap() - epe / n_on).abs());
    }
    verdict(worst <= 1e-12, format!("max deviation from loop oracles {worst:.1e} over 50 instances"))
}

fn criterion_3(base: &[Run]) -> Verdict {
    let budget = AttackConfig::default().budget;
    let converged = base.iter().filter(|r| r.converged).count();
    let in_window = base
        .iter()
        .filter(|r| r.converged)
        .all(|r| (0.95 * budget..=1.05 * budget).contains(&r.final_mean));
    let confined = base.iter().all(|r| r.out_of_mask_max == 0.0);
    let ranged = base.iter().all(|r| r.min_value >= 0.0 && r.max_value <= 1.0);
    verdict(
        converged >= 18 && in_window && confined && ranged,
        format!(
            "{converged}/20 converged (need 18), converged within 5%: {in_window}, out-of-mask untouched: {confined}, range kept: {ranged}"
        ),
    )
}

fn criterion_4(base: &[Run], cons: &[Run]) -> Verdict {
    let a: Vec<f64> = cons.iter().map(|r| r.off).collect();
    let b: Vec<f64> = base.iter().map(|r| r.off).collect();
    let t = sign_test_less(&a, &b).unwrap();
    verdict(
        mean(&a) < mean(&b) && t.p_value < 0.05,
        format!(
            "off-target EPE alpha=10 {:.4} vs alpha=0 {:.4}, {} of 20 scenes lower, sign test p={:.2e}",
            mean(&a),
            mean(&b),
            t.wins,
            t.p_value
        ),
    )
}

fn criterion_5(scenes: &[SceneInstance], base: &[Run], cons: &[Run], params: &FlowModelParams) -> Verdict {
    let ratio_ok = cons.iter().zip(base).filter(|(c, b)| c.on >= 0.9 * b.on).count();
    let on_c = mean(&cons.iter().map(|r| r.on).collect::<Vec<_>>());
    let on_b = mean(&base.iter().map(|r| r.on).collect::<Vec<_>>());
    let local = |alpha| AttackConfig {
        alpha,
        setting: AttackSetting::Local,
        ..Default::default()
    };
    let l0 = mean(&run_suite(scenes, &local(0.0), params).iter().map(|r| r.on).collect::<Vec<_>>());
    let l10 = mean(&run_suite(scenes, &local(ALPHA_CONSISTENT), params).iter().map(|r| r.on).collect::<Vec<_>>());
    let local_ratio = l10 / l0;
    verdict(
        ratio_ok == SUITE && on_c > on_b && (local_ratio - 1.0).abs() <= 0.25,
        format!(
            "global: {ratio_ok}/20 scenes keep >=0.9x on-target EPE, mean {on_c:.4} vs {on_b:.4}; local ratio {local_ratio:.3} (need within 0.75..1.25)"
        ),
    )
}

fn criterion_6(scenes: &[SceneInstance], params: &FlowModelParams) -> Verdict {
    let alphas = [0.01, 0.1, 1.0, 10.0, 100.0];
    let offs: Vec<f64> = alphas
        .iter()
        .map(|&a| mean(&run_suite(scenes, &global(a), params).iter().map(|r| r.off).collect::<Vec<_>>()))
        .collect();
    let monotone = offs.windows(2).all(|w| w[1] <= w[0]);
    let t = spearman_negative(&alphas, &offs).unwrap();
    verdict(
        monotone && t.rho < 0.0 && t.p_value < 0.05,
        format!(
            "off-target EPE over alpha grid {:?}, rho={:.2}, p={:.4}",
            offs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            t.rho,
            t.p_value
        ),
    )
}

fn criterion_7(scenes: &[SceneInstance], params: &FlowModelParams) -> Verdict {
    let family = model_family(params, 4).unwrap();
    let transfer = |alpha: f64| -> Vec<f64> {
        scenes
            .par_iter()
            .map(|s| {
                let target = s.labels.mask_of(Category::Vehicle);
                let clean: Vec<FlowField> = family.iter().map(|p| estimate_flow(&s.i1, &s.i2, p).unwrap()).collect();
                let mut total = 0.0;
                for (src, p_src) in family.iter().enumerate() {
                    let r = run_attack(&s.i1, &s.i2, &s.labels, &global(alpha), p_src).unwrap();
                    for (dst, p_dst) in family.iter().enumerate() {
                        if dst != src {
                            let f = estimate_flow(&r.perturbed_image, &s.i2, p_dst).unwrap();
                            total += epe_masked(&f, &clean[dst], &target).unwrap();
                        }
                    }
                }
                total / 12.0
            })
            .collect()
    };
    let t0 = transfer(0.0);
    let t10 = transfer(ALPHA_CONSISTENT);
    let t = sign_test_less(&t0, &t10).unwrap();
    verdict(
        mean(&t10) > mean(&t0) && t.p_value < 0.05,
        format!(
            "transferred on-target EPE alpha=10 {:.4} vs alpha=0 {:.4}, {} of 20 scenes higher, p={:.2e}",
            mean(&t10),
            mean(&t0),
            t.wins,
            t.p_value
        ),
    )
}

fn criterion_8(scenes: &[SceneInstance], params: &FlowModelParams) -> Verdict {
    let magnitudes = [0.4e-3, 2e-3, 4e-3, 8e-3];
    let methods = DefenseMethod::ALL;
    // [alpha][magnitude] -> (scores per method, ttc impact)
    let curve = |alpha: f64| -> Vec<(Vec<f64>, f64)> {
        magnitudes
            .iter()
            .map(|&m| {
                let per: Vec<_> = scenes
                    .par_iter()
                    .map(|s| {
                        let cfg = AttackConfig {
                            budget: m,
                            ..global(alpha)
                        };
                        let r = run_attack(&s.i1, &s.i2, &s.labels, &cfg, params).unwrap();
                        assess_perturbed(
                            &r.perturbed_image,
                            &s.i2,
                            &r.original_flow,
                            &r.masks.target,
                            &methods,
                            &[Downstream::TtcError],
                            params,
                        )
                        .unwrap()
                    })
                    .collect();
                let scores = (0..methods.len()).map(|k| mean(&per.iter().map(|d| d.scores[k]).collect::<Vec<_>>())).collect();
                (scores, mean(&per.iter().map(|d| d.impacts[0]).collect::<Vec<_>>()))
            })
            .collect()
    };
    let c0 = curve(0.0);
    let c10 = curve(ALPHA_CONSISTENT);
    let mut details = Vec::new();
    let mut pass = true;
    for (k, method) in methods.iter().enumerate() {
        let violations = (0..magnitudes.len())
            .filter(|&i| !(c10[i].0[k] <= c0[i].0[k] && c10[i].1 >= c0[i].1))
            .count();
        pass &= violations <= 1;
        details.push(format!("{method}: {violations} violations"));
    }
    let impacts: Vec<String> = (0..magnitudes.len())
        .map(|i| format!("{:.3}/{:.3}", c10[i].1, c0[i].1))
        .collect();
    verdict(
        pass,
        format!("{} (allow 1 each); TTC error a10/a0 per magnitude {:?}", details.join(", "), impacts),
    )
}

fn criterion_9() -> Verdict {
    let n = 32;
    let c = (n as f64 - 1.0) / 2.0;
    let flow = FlowField::from_fn(n, n, |y, x| (0.1 * (x as f64 - c), 0.1 * (y as f64 - c)));
    let mut worst: f64 = 0.0;
    for window in [3, 5, 7] {
        let t = ttc_from_flow(&flow, window).unwrap();
        for y in window..n - window {
            for x in window..n - window {
                worst = worst.max(t.get(y, x).map_or(f64::INFINITY, |v| (v - 10.0).abs() / 10.0));
            }
        }
    }
    let t = ttc_from_flow(&flow, 5).unwrap();
    let same = ttc_error(&t, &t).unwrap().mean_relative_error;
    let double = ttc_error(&t.scaled(2.0).unwrap(), &t).unwrap().mean_relative_error;
    verdict(
        worst < 0.01 && same == 0.0 && double == 1.0,
        format!("worst interior TTC error {worst:.1e}, ttc_error(T,T)={same}, ttc_error(2T,T)={double}"),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("flow.png");
    let (mut flo_ok, mut kitti_ok) = (true, true);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let mut rf = || Field2D::from_fn(h, w, |_, _| rng.random_range(-200.0f32..200.0) as f64);
        let f = FlowField::new(rf(), rf()).unwrap();
        flo_ok &= decode_flo(&encode_flo(&f), Path::new("mem.flo")).unwrap() == f;
        let q = kitti_quantize(&f);
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
        write_kitti_png(&png, &q, Some(&valid)).unwrap();
        let (back, back_valid) = read_kitti_png(&png).unwrap();
        kitti_ok &= back == q && back_valid == valid;
    }
    let mut bad = encode_flo(&FlowField::zeros(2, 2));
    bad[0] ^= 0xff;
    let mut huge = encode_flo(&FlowField::zeros(2, 2));
    huge[4..8].copy_from_slice(&i32::MAX.to_le_bytes());
    let rejects = decode_flo(&bad, Path::new("bad.flo")).is_err()
        && decode_flo(&huge, Path::new("huge.flo")).is_err()
        && decode_flo(&bad[..10], Path::new("short.flo")).is_err();
    let white = flow_to_color(&FlowField::zeros(4, 4), None)
        .unwrap()
        .channels()
        .iter()
        .all(|c| c.data().iter().all(|&v| v == 1.0));
    verdict(
        flo_ok && kitti_ok && rejects && white,
        format!("flo round trip {flo_ok}, KITTI round trip {kitti_ok}, malformed rejected {rejects}, zero flow white {white}"),
    )
}

fn criterion_11() -> Verdict {
    let cfg = ExperimentConfig {
        scenes: SceneSource::Synthetic {
            count: 1,
            base_seed: 7,
            width: 64,
            height: 64,
        },
        seed: 3,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_attack(
            &cfg,
            &RunOptions {
                out: out.clone(),
                workers: 2,
                scene: None,
            },
        )
        .unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut files = Vec::new();
    let mut stack = vec![a.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "flo" | "json")) {
                files.push(p);
            }
        }
    }
    let identical = files.iter().all(|p| {
        let twin = b.join(p.strip_prefix(&a).unwrap());
        std::fs::read(p).unwrap() == std::fs::read(twin).unwrap()
    });
    verdict(
        identical && files.len() >= 8,
        format!("{} CSV/.flo/JSON files compared, byte-identical: {identical}", files.len()),
    )
}

fn main() {
    let params = FlowModelParams::default();
    let started = Instant::now();
    let scenes = suite();
    let base = run_suite(&scenes, &global(0.0), &params);
    let cons = run_suite(&scenes, &global(ALPHA_CONSISTENT), &params);

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        (1, "gradient correctness", Box::new(criterion_1)),
        (2, "loss oracles", Box::new(criterion_2)),
        (3, "budget and confinement", Box::new(|| criterion_3(&base))),
        (4, "consistency reduces off-target damage", Box::new(|| criterion_4(&base, &cons))),
        (5, "consistency keeps on-target damage", Box::new(|| criterion_5(&scenes, &base, &cons, &params))),
        (6, "alpha sweep trend", Box::new(|| criterion_6(&scenes, &params))),
        (7, "black-box transfer", Box::new(|| criterion_7(&scenes, &params))),
        (8, "detection-impact dominance", Box::new(|| criterion_8(&scenes, &params))),
        (9, "TTC analytics", Box::new(criterion_9)),
        (10, "file formats", Box::new(criterion_10)),
        (11, "end-to-end determinism", Box::new(criterion_11)),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in &criteria {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(*id);
        }
    }
    println!("acceptance finished in {:.1}s", started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
