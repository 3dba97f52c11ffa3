//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process fails if any criterion does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coopnet::bnn::{
    binact, binconv2d, binconv_thresholded, fuse_batchnorm, BinActParams, BinConvParams,
    BinFilters, Direction,
};
use coopnet::cascade::{evaluate_batch, sweep_ct, CascadeConfig, Source};
use coopnet::float_ref::{batchnorm_ref, sign_bits_ref, BatchNorm, DEFAULT_BN_EPS};
use coopnet::int8::{conv2d_int8, AccMode, Int8ConvParams};
use coopnet::model::{build_caffenet, build_tiny, from_bytes, input_tensor, to_bytes, Layer};
use coopnet::perf::{layer_weight_bytes, memory_report, synthetic_profile, LatencyProfile};
use coopnet::synthetic::synthetic_dataset;
use coopnet::tensor::{
    pack_bits, unpack_bits, BitRole, FloatTensor, KernelShape, QuantFilters, QuantTensor, Shape,
};

const TIME_LIMIT: Duration = Duration::from_secs(30);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- int8 conv

fn round_half_away_shift(acc: i64, shift: u32) -> i64 {
    if shift == 0 {
        return acc;
    }
    let half = 1i64 << (shift - 1);
    let mag = (acc.abs() + half) >> shift;
    if acc < 0 {
        -mag
    } else {
        mag
    }
}

fn conv_oracle(
    x: &[i8],
    (c, h, w): (usize, usize, usize),
    wt: &[i8],
    (f, k): (usize, usize),
    bias: &[i32],
    stride: usize,
    pad: usize,
    shift: u32,
) -> Vec<i8> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(f * oh * ow);
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[fi] as i64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ci * h + iy as usize) * w + ix as usize] as i64;
                            let wv = wt[((fi * c + ci) * k + ky) * k + kx] as i64;
                            acc += xv * wv;
                        }
                    }
                }
                out.push(round_half_away_shift(acc, shift).clamp(-128, 127) as i8);
            }
        }
    }
    out
}

fn kernel_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1E7);
    let start = Instant::now();
    let cases = 1000;
    let mut mismatches = 0;
    for _ in 0..cases {
        let c = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        let pad = rng.gen_range(0..=2);
        let kmax = (h.min(w) + 2 * pad).min(5);
        let k = rng.gen_range(1..=kmax);
        let f = rng.gen_range(1..=8);
        let stride = rng.gen_range(1..=2);
        let shift = rng.gen_range(0..=14);
        let xs: Vec<i8> = (0..c * h * w).map(|_| rng.gen()).collect();
        let ws: Vec<i8> = (0..f * c * k * k).map(|_| rng.gen()).collect();
        let bias: Vec<i32> = (0..f).map(|_| rng.gen_range(-(1 << 18)..=(1 << 18))).collect();

        let x = QuantTensor::new(Shape::new(c, h, w).unwrap(), xs.clone(), -7).unwrap();
        let p = Int8ConvParams {
            weights: QuantFilters::new(KernelShape::new(f, c, k, k).unwrap(), ws.clone(), -7)
                .unwrap(),
            bias: bias.clone(),
            stride,
            pad,
            out_scale_shift: shift,
            acc_mode: AccMode::Wide,
        };
        let got = conv2d_int8(&x, &p).unwrap();
        let want = conv_oracle(&xs, (c, h, w), &ws, (f, k), &bias, stride, pad, shift);
        if got.data() != want.as_slice() || got.scale_exp() != -14 + shift as i32 {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && t < TIME_LIMIT,
        format!("{cases} cases, {mismatches} mismatches, {:.2}s", t.as_secs_f64()),
    )
}

// ------------------------------------------------------------- binary path

/// Window sizes `c*k*k` hitting each residue class mod 32.
fn window_candidates(residue: Option<usize>) -> Vec<(usize, usize)> {
    let mut out = vec![];
    for k in 1..=3 {
        for c in 1..=72 {
            let n = c * k * k;
            if residue.map_or(true, |r| n % 32 == r) {
                out.push((c, k));
            }
        }
    }
    out
}

fn binary_path_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1);
    let start = Instant::now();
    let groups = [Some(0), Some(1), Some(31), None];
    let cases = 1200;
    let mut conv_bad = 0;
    let mut thresh_bad = 0;
    let mut residues = [0usize; 3];
    for case in 0..cases {
        let pool = window_candidates(groups[case % groups.len()]);
        let (c, k) = pool[rng.gen_range(0..pool.len())];
        let n = c * k * k;
        match n % 32 {
            0 => residues[0] += 1,
            1 => residues[1] += 1,
            31 => residues[2] += 1,
            _ => {}
        }
        let h = rng.gen_range(k..=k + 6);
        let w = rng.gen_range(k..=k + 6);
        let f = rng.gen_range(1..=6);
        let stride = rng.gen_range(1..=2);
        let xbits: Vec<u8> = (0..c * h * w).map(|_| rng.gen_range(0..2)).collect();
        let wbits: Vec<u8> = (0..f * n).map(|_| rng.gen_range(0..2)).collect();
        let alpha: Vec<i8> = (0..f).map(|_| rng.gen_range(-127..=127)).collect();
        let alpha_exp = rng.gen_range(-9..=0);
        let x = pack_bits(&xbits, Shape::new(c, h, w).unwrap(), BitRole::Activation).unwrap();
        let p = BinConvParams {
            weights: BinFilters::from_bits(KernelShape::new(f, c, k, k).unwrap(), &wbits).unwrap(),
            alpha: alpha.clone(),
            alpha_scale_exp: alpha_exp,
            stride,
        };

        // float +-1 oracle
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let pm = |b: u8| if b == 1 { 1.0f64 } else { -1.0 };
        let mut want = Vec::with_capacity(f * oh * ow);
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut d = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let xv = xbits[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                                let wv = wbits[fi * n + (ci * k + ky) * k + kx];
                                d += pm(xv) * pm(wv);
                            }
                        }
                    }
                    want.push((alpha[fi] as f64 * 2f64.powi(alpha_exp) * d) as f32);
                }
            }
        }
        let pre = binconv2d(&x, &p).unwrap();
        if pre.data() != want.as_slice() {
            conv_bad += 1;
        }

        let act = BinActParams {
            thresholds: (0..f).map(|_| rng.gen()).collect(),
            scale_exp: rng.gen_range(-8..=0),
            directions: (0..f)
                .map(|_| if rng.gen_bool(0.5) { Direction::AtLeast } else { Direction::AtMost })
                .collect(),
        };
        let fused = binconv_thresholded(&x, &p, &act).unwrap();
        let two_step = binact(&pre, &act).unwrap();
        if fused != two_step {
            thresh_bad += 1;
        }
    }
    let t = start.elapsed();
    let covered = residues.iter().all(|&r| r > 0);
    outcome(
        conv_bad == 0 && thresh_bad == 0 && covered && t < TIME_LIMIT,
        format!(
            "{cases} cases (n%32 = 0/1/31: {}/{}/{}), conv mismatches {conv_bad}, threshold mismatches {thresh_bad}, {:.2}s",
            residues[0], residues[1], residues[2], t.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ fusion

fn fusion_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF05E);
    let channels = 16;
    let per_channel = 10_000;
    let bn = BatchNorm {
        mean: (0..channels).map(|_| rng.gen_range(-20.0..20.0)).collect(),
        var: (0..channels).map(|_| rng.gen_range(0.01..16.0)).collect(),
        gamma: (0..channels)
            .map(|_| {
                let g: f32 = rng.gen_range(0.1..3.0);
                if rng.gen_bool(0.3) {
                    -g
                } else {
                    g
                }
            })
            .collect(),
        beta: (0..channels).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        eps: DEFAULT_BN_EPS,
    };
    let fused = fuse_batchnorm(&bn).unwrap();

    // exact thresholds, computed independently of the fused parameters
    let exact: Vec<f64> = (0..channels)
        .map(|c| {
            let std = (bn.var[c] as f64 + bn.eps as f64).sqrt();
            bn.mean[c] as f64 - bn.beta[c] as f64 / bn.gamma[c] as f64 * std
        })
        .collect();
    let half_step = 2f64.powi(fused.scale_exp) / 2.0;

    let mut data = Vec::with_capacity(channels * per_channel);
    for c in 0..channels {
        let spread = 4.0 * (bn.var[c] as f64).sqrt() + 1.0;
        for _ in 0..per_channel {
            data.push((exact[c] + rng.gen_range(-spread..spread)) as f32);
        }
    }
    let x = FloatTensor::new(Shape::new(channels, 1, per_channel).unwrap(), data).unwrap();
    let unfused = sign_bits_ref(&batchnorm_ref(&x, &bn).unwrap());
    let fast = unpack_bits(&binact(&x, &fused).unwrap());

    let mut checked = 0;
    let mut disagreements = 0;
    for (i, &v) in x.data().iter().enumerate() {
        let c = i / per_channel;
        if ((v as f64) - exact[c]).abs() <= half_step {
            continue;
        }
        checked += 1;
        if unfused[i] != fast[i] {
            disagreements += 1;
        }
    }
    outcome(
        disagreements == 0 && checked > channels * per_channel / 2,
        format!(
            "{channels} channels x {per_channel} scalars, {checked} outside the +-{half_step} band, {disagreements} disagreements"
        ),
    )
}

// ----------------------------------------------------------------- cascade

fn argmax_lowest(p: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

fn cs_oracle(p: &[f32]) -> f32 {
    let mut v = p.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[0] - v[1]
}

fn cts() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn cascade_identities() -> Outcome {
    let m = build_tiny(7);
    let (ds, labels) = synthetic_dataset(&m, 1000, 0.05, 11).unwrap();
    let profile = synthetic_profile(&m);

    // two-pass oracle: both arms on every sample
    let mut bnn_probs = vec![];
    let mut int8_probs = vec![];
    for i in 0..ds.len() {
        let x = input_tensor(ds.sample(i), m.input_shape()).unwrap();
        bnn_probs.push(m.bnn().forward(&x).unwrap().probs);
        int8_probs.push(m.int8().forward(&x).unwrap().probs);
    }
    let bnn_correct =
        bnn_probs.iter().zip(&labels).filter(|(p, &y)| argmax_lowest(p) == y as usize).count();
    let bnn_acc = bnn_correct as f64 / ds.len() as f64;

    let rows = sweep_ct(&m, &ds, Some(&labels), &cts(), &profile).unwrap();
    let mut routing_mismatch = 0;
    let mut monotone = true;
    let mut prev_forwarded = 0;
    let mut acc0_ok = false;
    for (row, &ct) in rows.iter().zip(&cts()) {
        let report =
            evaluate_batch(&m, &ds, Some(&labels), &CascadeConfig::new(ct).unwrap(), &profile)
                .unwrap();
        for (i, rec) in report.samples.iter().enumerate() {
            let forward = (cs_oracle(&bnn_probs[i]) as f64) < ct;
            let class = if forward {
                argmax_lowest(&int8_probs[i])
            } else {
                argmax_lowest(&bnn_probs[i])
            };
            let source = if forward { Source::Int8 } else { Source::Bnn };
            if rec.source != source || rec.class != class {
                routing_mismatch += 1;
            }
        }
        if report.forwarded_count < prev_forwarded
            || row.forwarded_fraction != report.forwarded_count as f64 / 1000.0
        {
            monotone = false;
        }
        prev_forwarded = report.forwarded_count;
        if ct == 0.0 {
            acc0_ok = report.accuracy == Some(bnn_acc) && row.accuracy == Some(bnn_acc);
        }
    }
    let fractions: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.forwarded_fraction)).collect();
    outcome(
        acc0_ok && monotone && routing_mismatch == 0,
        format!(
            "acc(ct=0)={:.3} vs bnn-only {bnn_acc:.3}, forwarded [{}], {routing_mismatch} routing mismatches",
            rows[0].accuracy.unwrap_or(f64::NAN),
            fractions.join(" ")
        ),
    )
}

// ----------------------------------------------------------------- latency

fn latency_model() -> Outcome {
    let m = build_tiny(7);
    let (ds, labels) = synthetic_dataset(&m, 1000, 0.05, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1A7);
    let random = LatencyProfile {
        layers: synthetic_profile(&m)
            .layers
            .keys()
            .map(|k| (k.clone(), rng.gen_range(0..5000)))
            .collect(),
        l_cs: rng.gen_range(0..50),
    };
    let mut rows_checked = 0;
    let mut bad = 0;
    let mut ct0_ok = true;
    for profile in [synthetic_profile(&m), random] {
        let sum_arm = |arm: &coopnet::ModelGraph| -> u64 {
            arm.layers().iter().map(|l| profile.layers[&l.name]).sum()
        };
        let (l_bnn, l_int8) = (sum_arm(m.bnn()), sum_arm(m.int8()));
        let rows = sweep_ct(&m, &ds, Some(&labels), &cts(), &profile).unwrap();
        for row in &rows {
            let report = evaluate_batch(
                &m,
                &ds,
                Some(&labels),
                &CascadeConfig::new(row.ct).unwrap(),
                &profile,
            )
            .unwrap();
            let oracle: u64 = report
                .samples
                .iter()
                .map(|s| {
                    let base = l_bnn + profile.l_cs;
                    if s.source == Source::Int8 {
                        base + l_int8
                    } else {
                        base
                    }
                })
                .sum();
            rows_checked += 1;
            if row.modeled_latency_us != oracle || report.modeled_latency_us != oracle {
                bad += 1;
            }
        }
        ct0_ok &= rows[0].modeled_latency_us == 1000 * (l_bnn + profile.l_cs);
    }
    outcome(
        bad == 0 && ct0_ok,
        format!("{rows_checked} sweep rows over 2 profiles, {bad} mismatches, ct=0 identity {ct0_ok}"),
    )
}

// ------------------------------------------------------------------ memory

fn memory_model() -> Outcome {
    let m = build_caffenet();
    let mut exact = true;
    let mut bin_layers = 0;
    for spec in m.bnn().layers() {
        if let Layer::BinConvFused { conv, act } = &spec.layer {
            bin_layers += 1;
            let k = conv.weights.shape();
            let int8_bytes_per_filter = k.channels * k.height * k.width;
            let tables = conv.alpha.len() + act.thresholds.len() + act.directions.len();
            let want = k.filters * int8_bytes_per_filter.div_ceil(8) + tables;
            exact &= layer_weight_bytes(&spec.layer) == want;
        }
    }
    let r = memory_report(&m);
    let within = |v: usize, target: f64| (v as f64 - target).abs() <= 0.3 * target;
    let int8_ok = within(r.int8.total_bytes, 120_000.0);
    let bnn_ok = within(r.bnn.total_bytes, 94_000.0);
    outcome(
        exact && bin_layers > 0 && int8_ok && bnn_ok,
        format!(
            "binary weight bytes exact over {bin_layers} layers: {exact}; INT8 total {} B (target 120000 +-30%: {}), BNN total {} B (target 94000 +-30%: {})",
            r.int8.total_bytes,
            if int8_ok { "ok" } else { "out of band" },
            r.bnn.total_bytes,
            if bnn_ok { "ok" } else { "out of band" },
        ),
    )
}

// ------------------------------------------------------------------ format

fn format_robustness() -> Outcome {
    let m = build_tiny(5);
    let bytes = to_bytes(&m);
    let reloaded = from_bytes(&bytes).unwrap();
    let roundtrip = reloaded == m && to_bytes(&reloaded) == bytes;

    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let trials = 10_000;
    let mut panics = 0;
    let mut accepted = 0;
    let mut fixed_ok = 0;
    let mut fixed_noncanonical = 0;
    for trial in 0..trials {
        let mut b = bytes.clone();
        match trial % 4 {
            0 | 1 => {
                for _ in 0..rng.gen_range(1..=4) {
                    let i = rng.gen_range(0..b.len());
                    b[i] ^= rng.gen_range(1..=255u8);
                }
            }
            2 => b.truncate(rng.gen_range(0..b.len())),
            _ => {
                let i = rng.gen_range(0..=b.len());
                b.insert(i, rng.gen());
            }
        }
        match catch_unwind(AssertUnwindSafe(|| from_bytes(&b).map(|_| ()))) {
            Err(_) => panics += 1,
            Ok(Ok(())) => accepted += 1,
            Ok(Err(_)) => {}
        }
        // same mutation with a valid checksum, to reach the body parser
        if b.len() >= 12 {
            let n = b.len() - 4;
            let crc = crc32fast::hash(&b[..n]);
            b[n..].copy_from_slice(&crc.to_le_bytes());
            match catch_unwind(AssertUnwindSafe(|| from_bytes(&b))) {
                Err(_) => panics += 1,
                Ok(Ok(model)) => {
                    fixed_ok += 1;
                    if to_bytes(&model) != b {
                        fixed_noncanonical += 1;
                    }
                }
                Ok(Err(_)) => {}
            }
        }
    }
    outcome(
        roundtrip && panics == 0 && accepted == 0 && fixed_noncanonical == 0,
        format!(
            "{trials} mutations: {panics} panics, {accepted} accepted; with fixed checksum {fixed_ok} still valid ({fixed_noncanonical} non-canonical); roundtrip identical: {roundtrip}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("kernel oracle equivalence", kernel_oracle_equivalence),
        ("binary path exactness", binary_path_exactness),
        ("batch-norm fusion agreement", fusion_agreement),
        ("cascade identities", cascade_identities),
        ("latency model", latency_model),
        ("memory model", memory_model),
        ("format robustness", format_robustness),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
