//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails. Runs sequentially so that the timed entropy
//! criterion is not competing with the codec criteria for CPU.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use common::*;
use lbhic::blocking::{run_wavefront, wavefront_sets, BlockIndex};
use lbhic::bpm::{boundary_loss, boundary_mask};
use lbhic::container::Container;
use lbhic::entropy::{
    build_cdf, estimate_rate, gmm_pmf, rc_decode, rc_encode, CdfTable, Component, ALPHABET, SYMBOL_MAX,
    SYMBOL_MIN, TOTAL_FREQ,
};
use lbhic::metrics::{bd_rate, ms_ssim, psnr, satd, RdPoint};
use lbhic::pipeline::{decode_image, encode_image, EncodeOptions, Model};
use lbhic::raster::Image;
use lbhic::tensor::{
    broadcast_expand, conv2d, masked_conv2d, masked_conv2d_at, nonlocal_block, strip_pool, tconv2d, Kernel,
    MaskType, NonLocalWeights, StripDirection, Tensor,
};
use lbhic::weights::{toy_init, ModelConfig, Pcg32};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !{ $cond } {
            return Err(format!($($msg)+));
        }
    };
}

const GMM_STREAMS: usize = 1000;

struct Stream {
    params: Vec<Vec<Component>>,
    symbols: Vec<i32>,
}

fn std_normal(rng: &mut Pcg32) -> f64 {
    let u1 = rng.next_unit().max(1e-300);
    let u2 = rng.next_unit();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-symbol random mixtures with symbols drawn from them; about one symbol
/// in a hundred is replaced by a uniform outlier.
fn gmm_stream(seed: u64) -> Stream {
    let mut rng = Pcg32::new(seed, 0x5eed);
    let len = 1 + below(&mut rng, 1000);
    let k = 1 + below(&mut rng, 3);
    let spread = [0.5f32, 5.0, 40.0][below(&mut rng, 3)];
    let mut params = Vec::with_capacity(len);
    let mut symbols = Vec::with_capacity(len);
    for _ in 0..len {
        let raw: Vec<f32> = (0..k).map(|_| rng.uniform(0.05, 1.0)).collect();
        let total: f32 = raw.iter().sum();
        let comps: Vec<Component> = raw
            .iter()
            .map(|&r| {
                let scale = (rng.uniform(-3.0, 4.0)).exp();
                Component::new(r / total, rng.uniform(-spread, spread), scale)
            })
            .collect();
        let s = if below(&mut rng, 100) == 0 {
            SYMBOL_MIN + below(&mut rng, ALPHABET) as i32
        } else {
            let mut u = rng.next_unit() as f32;
            let c = comps
                .iter()
                .find(|c| {
                    u -= c.weight;
                    u < 0.0
                })
                .unwrap_or(&comps[k - 1]);
            let v = c.mean as f64 + c.scale as f64 * std_normal(&mut rng);
            (v.round() as i64).clamp(SYMBOL_MIN as i64, SYMBOL_MAX as i64) as i32
        };
        params.push(comps);
        symbols.push(s);
    }
    Stream { params, symbols }
}

struct EntropyRun {
    elapsed: f64,
    failures: Vec<String>,
    rate_violations: Vec<String>,
    worst_rate_slack: f64,
    symbols: usize,
}

fn run_entropy_streams() -> EntropyRun {
    let start = Instant::now();
    let mut run = EntropyRun {
        elapsed: 0.0,
        failures: Vec::new(),
        rate_violations: Vec::new(),
        worst_rate_slack: f64::NEG_INFINITY,
        symbols: 0,
    };
    for seed in 0..GMM_STREAMS as u64 {
        let stream = gmm_stream(seed);
        run.symbols += stream.symbols.len();
        let bytes = rc_encode(&stream.symbols, |i| build_cdf(&stream.params[i]));
        let decoded = rc_decode(&bytes, |i, _| build_cdf(&stream.params[i]), stream.symbols.len());
        if decoded.as_deref() != Ok(&stream.symbols[..]) {
            run.failures.push(format!("stream {seed}: {decoded:?}"));
            continue;
        }
        let tables: Vec<CdfTable> = stream.params.iter().map(|p| build_cdf(p)).collect();
        let est = estimate_rate(&tables, &stream.symbols);
        let actual = 8.0 * bytes.len() as f64;
        let bound = 0.02 * est + 64.0;
        let gap = (actual - est).abs();
        run.worst_rate_slack = run.worst_rate_slack.max(gap - bound);
        if gap > bound {
            run.rate_violations
                .push(format!("stream {seed}: {actual} bits vs estimate {est:.1}"));
        }
    }
    run.elapsed = start.elapsed().as_secs_f64();
    run
}

fn entropy_round_trip(run: &EntropyRun) -> Outcome {
    ensure!(
        run.failures.is_empty(),
        "{} streams failed, first: {}",
        run.failures.len(),
        run.failures[0]
    );
    ensure!(run.elapsed < 60.0, "took {:.1} s", run.elapsed);
    Ok(format!(
        "{GMM_STREAMS} streams, {} symbols, {:.1} s",
        run.symbols, run.elapsed
    ))
}

fn rate_accounting(run: &EntropyRun) -> Outcome {
    ensure!(run.failures.is_empty(), "round trip failed, rate not checked");
    ensure!(
        run.rate_violations.is_empty(),
        "{} streams over the bound, first: {}",
        run.rate_violations.len(),
        run.rate_violations[0]
    );
    Ok(format!(
        "every stream within bound, tightest margin {:.1} bits",
        -run.worst_rate_slack
    ))
}

fn toy_model() -> Model {
    Model::from_store(&toy_init(&ModelConfig::low(), 42)).expect("toy model")
}

fn no_bpm(workers: usize) -> EncodeOptions {
    EncodeOptions {
        block_size: 128,
        workers,
        bpm: false,
    }
}

fn codec_determinism(model: &Model) -> Outcome {
    let mut rng = Pcg32::new(2024, 3);
    let mut bytes_total = 0;
    for i in 0..20 {
        let img = if i % 2 == 0 {
            noise_image(&mut rng, 384, 256)
        } else {
            structured_image(&mut rng, 384, 256)
        };
        let enc = encode_image(&img, model, &no_bpm(8)).map_err(|e| format!("image {i}: {e}"))?;
        let bytes = enc.bytes();
        bytes_total += bytes.len();
        let container = Container::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let dec = decode_image(&container, model, 8, false).map_err(|e| format!("image {i}: {e}"))?;
        let closed_loop = enc.reconstruction().map_err(|e| e.to_string())?;
        ensure!(dec.image == closed_loop, "image {i}: decoded pixels differ");
        for (b, (blk, rec)) in enc.blocks.iter().zip(&dec.recon_blocks).enumerate() {
            ensure!(
                blk.recon
                    .data()
                    .iter()
                    .zip(rec.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "image {i} block {b}: reconstruction not bit-exact"
            );
            let (z, y) = &dec.latents[b];
            ensure!(*z == blk.z_hat, "image {i} block {b}: hyper latent differs");
            ensure!(*y == blk.y_hat, "image {i} block {b}: main latent differs");
        }
    }
    Ok(format!("20 images, {bytes_total} bytes total"))
}

fn thread_invariance(model: &Model) -> Outcome {
    let mut rng = Pcg32::new(77, 1);
    let images = [
        noise_image(&mut rng, 384, 256),
        structured_image(&mut rng, 384, 256),
    ];
    for (i, img) in images.iter().enumerate() {
        let mut streams = Vec::new();
        for workers in [1, 2, 8] {
            let enc = encode_image(img, model, &no_bpm(workers)).map_err(|e| e.to_string())?;
            streams.push(enc.bytes());
        }
        ensure!(
            streams.iter().all(|s| *s == streams[0]),
            "image {i}: bitstreams differ across worker counts"
        );
        let container = Container::from_bytes(&streams[0]).map_err(|e| e.to_string())?;
        let recon: Vec<Image> = [1, 2, 8]
            .iter()
            .map(|&w| decode_image(&container, model, w, false).map(|d| d.image))
            .collect::<lbhic::Result<_>>()
            .map_err(|e| e.to_string())?;
        ensure!(
            recon.iter().all(|r| *r == recon[0]),
            "image {i}: reconstructions differ across worker counts"
        );
    }
    // Postprocessed output on a smaller image with a 2x3 grid.
    let img = structured_image(&mut rng, 192, 128);
    let opts = |workers| EncodeOptions {
        block_size: 64,
        workers,
        bpm: true,
    };
    let mut streams = Vec::new();
    for workers in [1, 2, 8] {
        streams.push(
            encode_image(&img, model, &opts(workers))
                .map_err(|e| e.to_string())?
                .bytes(),
        );
    }
    ensure!(
        streams.iter().all(|s| *s == streams[0]),
        "postprocessed case: bitstreams differ"
    );
    let container = Container::from_bytes(&streams[0]).map_err(|e| e.to_string())?;
    let mut outs = Vec::new();
    for w in [1, 2, 8] {
        let d = decode_image(&container, model, w, true).map_err(|e| e.to_string())?;
        ensure!(d.bpm_applied, "postprocessing was not applied");
        outs.push(d.image);
    }
    ensure!(
        outs.iter().all(|o| *o == outs[0]),
        "postprocessed reconstructions differ"
    );
    Ok("workers 1/2/8 agree on 3 images".into())
}

fn wavefront_correctness() -> Outcome {
    let mut grids = 0;
    for rows in 1..=16 {
        for cols in 1..=16 {
            let plan = wavefront_sets(rows, cols).map_err(|e| e.to_string())?;
            ensure!(
                plan.len() == rows + cols - 1,
                "{rows}x{cols}: {} sets",
                plan.len()
            );
            let mut seen = BTreeSet::new();
            for (line, set) in plan.sets.iter().enumerate() {
                ensure!(!set.is_empty(), "{rows}x{cols}: empty set {line}");
                for idx in set {
                    ensure!(
                        idx.row < rows && idx.col < cols,
                        "{rows}x{cols}: {idx:?} outside grid"
                    );
                    ensure!(idx.row + idx.col == line, "{rows}x{cols}: {idx:?} in set {line}");
                    ensure!(seen.insert(*idx), "{rows}x{cols}: {idx:?} listed twice");
                }
            }
            ensure!(seen.len() == rows * cols, "{rows}x{cols}: sets miss blocks");

            let log: Mutex<Vec<BlockIndex>> = Mutex::new(Vec::new());
            let workers = 1 + (rows * cols) % 8;
            let out = run_wavefront(&plan, workers, |idx, done| {
                for dep in [
                    (idx.row > 0).then(|| BlockIndex::new(idx.row - 1, idx.col)),
                    (idx.col > 0).then(|| BlockIndex::new(idx.row, idx.col - 1)),
                ]
                .into_iter()
                .flatten()
                {
                    if done.get(dep) != Some(&dep) {
                        panic!("{idx:?} ran before its neighbour {dep:?}");
                    }
                }
                log.lock().unwrap().push(idx);
                Ok(idx)
            })
            .map_err(|e| e.to_string())?;
            let order = log.into_inner().unwrap();
            let pos = |b: BlockIndex| order.iter().position(|&o| o == b).expect("logged");
            for idx in &order {
                if idx.row > 0 {
                    ensure!(
                        pos(BlockIndex::new(idx.row - 1, idx.col)) < pos(*idx),
                        "{idx:?} before upper"
                    );
                }
                if idx.col > 0 {
                    ensure!(
                        pos(BlockIndex::new(idx.row, idx.col - 1)) < pos(*idx),
                        "{idx:?} before left"
                    );
                }
            }
            let raster: Vec<BlockIndex> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| BlockIndex::new(r, c)))
                .collect();
            ensure!(out == raster, "{rows}x{cols}: results not in raster order");
            grids += 1;
        }
    }
    Ok(format!("{grids} grids"))
}

const TOL: f64 = 1e-6;

fn check_close(what: &str, case: usize, got: &[f32], want: &[f64]) -> Result<f64, String> {
    ensure!(
        got.len() == want.len(),
        "{what} case {case}: length {} vs {}",
        got.len(),
        want.len()
    );
    let err = max_abs_diff(got, want);
    ensure!(err <= TOL, "{what} case {case}: max error {err:.3e}");
    Ok(err)
}

fn layer_oracles() -> Outcome {
    let mut rng = Pcg32::new(99, 5);
    let mut worst = 0.0f64;
    // Distance of the f32 layers from exact f64 arithmetic; reported only.
    let mut worst_f64 = 0.0f64;
    const CASES: usize = 150;
    for case in 0..CASES {
        let (c, h, w) = (
            1 + below(&mut rng, 4),
            1 + below(&mut rng, 12),
            1 + below(&mut rng, 12),
        );
        let x = rand_tensor(&mut rng, c, h, w, 1.0);
        for dir in [StripDirection::Vertical, StripDirection::Horizontal] {
            let pooled = strip_pool(&x, dir).map_err(|e| e.to_string())?;
            let mut want = Vec::new();
            for ch in 0..c {
                match dir {
                    StripDirection::Vertical => {
                        for xx in 0..w {
                            want.push((0..h).map(|y| x.get(ch, y, xx) as f64).sum::<f64>() / h as f64);
                        }
                    }
                    StripDirection::Horizontal => {
                        for y in 0..h {
                            want.push((0..w).map(|xx| x.get(ch, y, xx) as f64).sum::<f64>() / w as f64);
                        }
                    }
                }
            }
            worst = worst.max(check_close("strip pool", case, pooled.data(), &want)?);
            let expanded = broadcast_expand(&pooled, h, w).map_err(|e| e.to_string())?;
            let want: Vec<f64> = (0..c * h * w)
                .map(|i| {
                    let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                    match dir {
                        StripDirection::Vertical => pooled.get(ch, 0, xx) as f64,
                        StripDirection::Horizontal => pooled.get(ch, y, 0) as f64,
                    }
                })
                .collect();
            worst = worst.max(check_close("broadcast", case, expanded.data(), &want)?);
        }
    }

    for case in 0..CASES {
        let k = [1, 3, 5][below(&mut rng, 3)];
        let stride = 1 + below(&mut rng, 3);
        let pad = below(&mut rng, k / 2 + 1);
        let (ci, co) = (1 + below(&mut rng, 3), 1 + below(&mut rng, 4));
        let h = k.saturating_sub(2 * pad).max(1) + below(&mut rng, 10);
        let w = k.saturating_sub(2 * pad).max(1) + below(&mut rng, 10);
        let x = rand_tensor(&mut rng, ci, h, w, 1.0);
        let ker = rand_kernel(&mut rng, co, ci, k, 0.5);
        let bias = rand_vec(&mut rng, co, 0.5);
        let y = conv2d(&x, &ker, &bias, stride, pad).map_err(|e| format!("conv case {case}: {e}"))?;
        let (oh, ow, wide) = conv_ref(&x, &ker, &bias, stride, pad);
        ensure!(y.dims() == (co, oh, ow), "conv case {case}: dims {:?}", y.dims());
        worst = worst.max(check_close(
            "conv",
            case,
            y.data(),
            &conv_ref32(&x, &ker, &bias, stride, pad, |_, _| true),
        )?);
        worst_f64 = worst_f64.max(max_abs_diff(y.data(), &wide));

        let op = below(&mut rng, stride);
        let (th, tw) = (1 + below(&mut rng, 8), 1 + below(&mut rng, 8));
        let pad = pad
            .min(((th - 1) * stride + k + op - 1) / 2)
            .min(((tw - 1) * stride + k + op - 1) / 2);
        let xt = rand_tensor(&mut rng, ci, th, tw, 1.0);
        let y = tconv2d(&xt, &ker, &bias, stride, pad, op).map_err(|e| format!("tconv case {case}: {e}"))?;
        let (oh, ow, wide) = tconv_ref(&xt, &ker, &bias, stride, pad, op);
        ensure!(y.dims() == (co, oh, ow), "tconv case {case}: dims {:?}", y.dims());
        let want = tconv_ref32(&xt, &ker, &bias, stride, pad, op);
        worst = worst.max(check_close("tconv", case, y.data(), &want)?);
        worst_f64 = worst_f64.max(max_abs_diff(y.data(), &wide));
    }

    for case in 0..CASES {
        let k = [3, 5, 7][below(&mut rng, 3)];
        let (ci, co) = (1 + below(&mut rng, 3), 1 + below(&mut rng, 4));
        let (h, w) = (1 + below(&mut rng, 10), 1 + below(&mut rng, 10));
        let x = rand_tensor(&mut rng, ci, h, w, 1.0);
        let ker = rand_kernel(&mut rng, co, ci, k, 0.5);
        let bias = rand_vec(&mut rng, co, 0.5);
        let y = masked_conv2d(&x, &ker, &bias, MaskType::A).map_err(|e| e.to_string())?;
        let keep = |ky: usize, kx: usize| ky * k + kx < (k / 2) * k + k / 2;
        let want = conv_ref32(&x, &ker, &bias, 1, k / 2, keep);
        worst = worst.max(check_close("masked conv", case, y.data(), &want)?);
        worst_f64 = worst_f64.max(max_abs_diff(y.data(), &masked_conv_ref(&x, &ker, &bias)));
    }

    for case in 0..CASES {
        let c = 2 * (1 + below(&mut rng, 3));
        let (h, w) = (1 + below(&mut rng, 6), 1 + below(&mut rng, 6));
        let x = rand_tensor(&mut rng, c, h, w, 1.0);
        let mut proj = |o, i| (rand_kernel(&mut rng, o, i, 1, 0.5), rand_vec(&mut rng, o, 0.1));
        let weights = NonLocalWeights {
            theta: proj(c / 2, c),
            phi: proj(c / 2, c),
            g: proj(c / 2, c),
            out: proj(c, c / 2),
        };
        let y = nonlocal_block(&x, &weights).map_err(|e| e.to_string())?;
        worst = worst.max(check_close(
            "nonlocal",
            case,
            y.data(),
            &nonlocal_ref(&x, &weights),
        )?);
    }

    let causal = masked_causality()?;
    Ok(format!(
        "{CASES} cases per layer, worst error {worst:.2e} (f64 reference {worst_f64:.2e}); {causal}"
    ))
}

/// Perturbs every position of an 8x8 latent in turn and checks which outputs
/// move: none at or before it in raster order, and the position's full
/// causal footprint after it.
fn masked_causality() -> Result<String, String> {
    let mut rng = Pcg32::new(8, 8);
    let (c, n, k) = (3, 8, 5);
    let x = rand_tensor(&mut rng, c, n, n, 1.0);
    let ker = Kernel::from_fn(4, c, k, k, |_, _, _, _| rng.uniform(0.1, 1.0));
    let bias = rand_vec(&mut rng, 4, 0.5);
    let base = masked_conv2d(&x, &ker, &bias, MaskType::A).map_err(|e| e.to_string())?;
    let mut at = vec![0.0; 4];
    for p in 0..n * n {
        masked_conv2d_at(&x, &ker, &bias, p / n, p % n, &mut at).map_err(|e| e.to_string())?;
        for (o, v) in at.iter().enumerate() {
            ensure!(
                *v == base.get(o, p / n, p % n),
                "single-position output differs at {p}"
            );
        }
    }
    for q in 0..n * n {
        for ch in 0..c {
            let mut xp = x.clone();
            let (qy, qx) = (q / n, q % n);
            xp.set(ch, qy, qx, x.get(ch, qy, qx) + 10.0);
            let y = masked_conv2d(&xp, &ker, &bias, MaskType::A).map_err(|e| e.to_string())?;
            for p in 0..n * n {
                let (py, px) = (p / n, p % n);
                let dy = qy as isize - py as isize + (k / 2) as isize;
                let dx = qx as isize - px as isize + (k / 2) as isize;
                let reaches = p > q
                    && (0..k as isize).contains(&dy)
                    && (0..k as isize).contains(&dx)
                    && (dy as usize) * k + (dx as usize) < (k / 2) * k + k / 2;
                for o in 0..4 {
                    let moved = y.get(o, py, px) != base.get(o, py, px);
                    ensure!(
                        moved == reaches,
                        "perturbing {q} (ch {ch}) {} output {p}",
                        if moved { "moved" } else { "did not move" }
                    );
                }
            }
        }
    }
    Ok(format!("causality exhaustive on {n}x{n}"))
}

fn cdf_tables() -> Outcome {
    let unit = [Component::new(1.0, 0.0, 1.0)];
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let p0_oracle = simpson(pdf, -0.5, 0.5, 2000);
    ensure!((p0_oracle - 0.382925).abs() < 1e-4, "oracle p(0) = {p0_oracle}");
    let p0 = gmm_pmf(&unit, 0);
    ensure!(
        (p0 - p0_oracle).abs() < 1e-4,
        "pmf p(0) = {p0}, oracle {p0_oracle}"
    );
    // Quantized table: one reserved count per symbol, the rest shared out in
    // proportion, so symbol 0 gets 1 + floor(p * 65280) give or take one.
    let table = build_cdf(&unit);
    let expected = 1.0 + (p0_oracle * (TOTAL_FREQ - ALPHABET as u32) as f64).floor();
    ensure!(
        (table.freq(0) as f64 - expected).abs() <= 1.0,
        "table freq(0) = {}, construction gives {expected}",
        table.freq(0)
    );

    let mut rng = Pcg32::new(31, 4);
    let mut checked = 0;
    for i in 0..500 {
        let k = 1 + below(&mut rng, 3);
        let centred = i % 2 == 0;
        let comps: Vec<Component> = (0..k)
            .map(|_| {
                let mean = if centred { 0.0 } else { rng.uniform(-150.0, 150.0) };
                Component::new(1.0 / k as f32, mean, rng.uniform(-7.0, 6.0).exp())
            })
            .collect();
        let t = build_cdf(&comps);
        let cum = t.cumulative();
        ensure!(
            cum[0] == 0 && cum[ALPHABET] == TOTAL_FREQ,
            "case {i}: ends {} {}",
            cum[0],
            cum[ALPHABET]
        );
        ensure!(
            cum.windows(2).all(|w| w[1] > w[0]),
            "case {i}: not strictly monotone"
        );
        if centred {
            for s in 1..=126 {
                let (a, b) = (gmm_pmf(&comps, s), gmm_pmf(&comps, -s));
                ensure!(
                    (a - b).abs() <= 1e-12 * a.max(1e-300).max(b),
                    "case {i}: p({s})={a} p(-{s})={b}"
                );
            }
        }
        checked += 1;
    }
    Ok(format!(
        "p(0) = {p0:.6} (oracle {p0_oracle:.6}), {checked} tables"
    ))
}

fn boundary_mask_checks() -> Outcome {
    let m = boundary_mask(256, 256, 128, 8).map_err(|e| e.to_string())?;
    ensure!(m.count() == 4032, "256x256 mask has {} pixels", m.count());
    for (h, w) in [(128, 128), (100, 120), (64, 128)] {
        let m = boundary_mask(h, w, 128, 8).map_err(|e| e.to_string())?;
        ensure!(m.is_empty(), "single-block {h}x{w} mask has {} pixels", m.count());
    }
    let mut rng = Pcg32::new(5, 5);
    let x = rand_tensor(&mut rng, 3, 256, 256, 1.0);
    let x_hat = rand_tensor(&mut rng, 3, 256, 256, 1.0);
    let m = boundary_mask(256, 256, 128, 8).map_err(|e| e.to_string())?;
    let same = boundary_loss(&x, &x, &m, 10.0).map_err(|e| e.to_string())?;
    ensure!(same == 0.0, "loss(X, X) = {same}");
    let got = boundary_loss(&x, &x_hat, &m, 10.0).map_err(|e| e.to_string())?;
    let mut plain = 0.0;
    let mut band = 0.0;
    let n = (3 * 256 * 256) as f64;
    for c in 0..3 {
        for y in 0..256 {
            for xx in 0..256 {
                let d = (x.get(c, y, xx) - x_hat.get(c, y, xx)) as f64;
                plain += d * d / n;
                let near = |v: usize| (124..132).contains(&v);
                if near(y) || near(xx) {
                    band += d * d / n;
                }
            }
        }
    }
    let want = plain + 10.0 * band;
    ensure!(
        (got - want).abs() <= 1e-9 * want,
        "loss {got} vs closed form {want}"
    );
    Ok(format!("4032 pixels, loss {got:.6}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = Pcg32::new(12, 12);
    let mut worst_psnr = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (8 + below(&mut rng, 40), 8 + below(&mut rng, 40));
        let a = noise_image(&mut rng, w, h);
        let b = Image::from_fn(w, h, |c, y, x| {
            let d = below(&mut rng, 21) as i32 - 10;
            (a.pixel(c, y, x) as i32 + d).clamp(0, 255) as u8
        });
        let got = psnr(&a, &b).map_err(|e| e.to_string())?;
        worst_psnr = worst_psnr.max((got - psnr_ref(&a, &b)).abs());
    }
    ensure!(worst_psnr <= 1e-6, "PSNR error {worst_psnr:.3e}");

    let mut worst_ssim = 0.0f64;
    for i in 0..3 {
        let a = structured_image(&mut rng, 176 + 8 * i, 184);
        let b = Image::from_fn(a.width(), a.height(), |c, y, x| {
            let d = below(&mut rng, 41) as i32 - 20;
            (a.pixel(c, y, x) as i32 + d).clamp(0, 255) as u8
        });
        let got = ms_ssim(&a, &b).map_err(|e| e.to_string())?;
        worst_ssim = worst_ssim.max((got - ms_ssim_ref(&a, &b)).abs());
        let same = ms_ssim(&a, &a).map_err(|e| e.to_string())?;
        ensure!((same - 1.0).abs() < 1e-12, "MS-SSIM(a, a) = {same}");
    }
    ensure!(worst_ssim <= 1e-4, "MS-SSIM error {worst_ssim:.3e}");

    for case in 0..50 {
        let block = [2, 4, 8, 16][below(&mut rng, 4)];
        let (c, h, w) = (
            1 + below(&mut rng, 3),
            1 + below(&mut rng, 40),
            1 + below(&mut rng, 40),
        );
        let x = Tensor::from_fn(c, h, w, |_, _, _| below(&mut rng, 511) as f32 - 255.0);
        let got = satd(&x, block).map_err(|e| e.to_string())?;
        let want = satd_ref(&x, block);
        ensure!(got == want, "SATD case {case}: {got} vs {want}");
    }

    let anchor: Vec<RdPoint> = [(0.2, 30.1), (0.4, 32.6), (0.8, 35.3), (1.5, 38.0)]
        .iter()
        .map(|&(r, q)| RdPoint::new(r, q))
        .collect();
    let doubled: Vec<RdPoint> = anchor
        .iter()
        .map(|p| RdPoint::new(2.0 * p.bpp, p.quality))
        .collect();
    let zero = bd_rate(&anchor, &anchor).map_err(|e| e.to_string())?;
    ensure!(zero.abs() < 1e-9, "bd_rate on identical curves = {zero}");
    let hundred = bd_rate(&anchor, &doubled).map_err(|e| e.to_string())?;
    ensure!(
        (hundred - 100.0).abs() <= 0.1,
        "bd_rate on doubled rates = {hundred}"
    );
    Ok(format!(
        "psnr err {worst_psnr:.1e}, ms-ssim err {worst_ssim:.1e}, satd exact, bd {zero:.2e}% / {hundred:.4}%"
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };

    let entropy = run_entropy_streams();
    results.push(("entropy round trip", guard(&|| entropy_round_trip(&entropy))));
    results.push(("rate accounting", guard(&|| rate_accounting(&entropy))));
    let model = toy_model();
    results.push(("codec determinism", guard(&|| codec_determinism(&model))));
    results.push(("thread invariance", guard(&|| thread_invariance(&model))));
    results.push(("wavefront correctness", guard(&wavefront_correctness)));
    results.push(("layer oracles", guard(&layer_oracles)));
    results.push(("cdf tables", guard(&cdf_tables)));
    results.push(("boundary mask", guard(&boundary_mask_checks)));
    results.push(("metric oracles", guard(&metric_oracles)));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
