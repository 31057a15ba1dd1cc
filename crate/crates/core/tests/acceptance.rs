//! Acceptance criteria 1-7, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the summary lines are always
//! printed. Exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use evframe::attention::{channel_attention, spatial_attention, Cbam, CbamOrder, CbamSettings, ChannelAttention, SpatialAttention};
use evframe::accounting::{compare, conv_flops, linear_flops, profile, render_comparison};
use evframe::codec::{decode_aedat2, decode_atis_bin, decode_portable, encode_portable};
use evframe::dataset::{convert_stream, ConvertOptions, Dataset};
use evframe::model::{build_model, gradient_check, HeadConfig, HeadPool, Model, ModelConfig};
use evframe::nn::gradcheck::{finite_difference_check, project, random_projection, random_tensor};
use evframe::nn::*;
use evframe::representation::{integrate_frames, slice_by_count, NormalizeMode, ReduceMode, SliceMode};
use evframe::synthetic::{bar_dataset, BarSettings};
use evframe::train::{evaluate, train, Precision, RunDir, TrainConfig, TrainState};
use evframe::{Event, EventStream, Polarity, SensorGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_stream(rng: &mut ChaCha8Rng, n: usize, geometry: SensorGeometry) -> EventStream {
    let mut t = rng.gen_range(0..1_000_000u64);
    let events = (0..n)
        .map(|_| {
            t += rng.gen_range(0..50);
            Event::new(
                rng.gen_range(0..geometry.width),
                rng.gen_range(0..geometry.height),
                t,
                Polarity::from_bit(rng.gen()),
            )
        })
        .collect();
    EventStream::new(events, geometry, None).unwrap()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut streams = 0;
    for i in 0..120 {
        let n = rng.gen_range(100..=50_000usize);
        let g = SensorGeometry::new(rng.gen_range(1..=128), rng.gen_range(1..=128)).unwrap();
        let s = random_stream(&mut rng, n, g);
        let t = [1, 5, 20][i % 3];
        let mode = if i % 2 == 0 { SliceMode::StrictPaper } else { SliceMode::RemainderToLast };
        let frames = integrate_frames(&s, &slice_by_count(n, t, mode).unwrap()).map_err(|e| e.to_string())?;

        // oracle: slice k holds events [k·⌊N/T⌋, (k+1)·⌊N/T⌋), the last
        // slice also takes the remainder in RemainderToLast mode
        let (w, h) = (g.width as usize, g.height as usize);
        let q = n / t;
        let mut oracle = vec![0u32; t * 2 * h * w];
        for (idx, e) in s.events.iter().enumerate() {
            let mut k = idx / q;
            if k >= t {
                if mode == SliceMode::StrictPaper {
                    continue;
                }
                k = t - 1;
            }
            let p = if e.p == Polarity::On { 1 } else { 0 };
            oracle[((k * 2 + p) * h + e.y as usize) * w + e.x as usize] += 1;
        }
        for k in 0..t {
            for p in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let want = oracle[((k * 2 + p) * h + y) * w + x];
                        ensure(frames.get(k, p, x, y) == want, || {
                            format!("stream {i}: cell ({k},{p},{x},{y}) {} != {want}", frames.get(k, p, x, y))
                        })?;
                    }
                }
            }
        }
        let expect_total = match mode {
            SliceMode::StrictPaper => (t * q) as u64,
            SliceMode::RemainderToLast => n as u64,
        };
        ensure(frames.total() == expect_total, || format!("stream {i}: total {}", frames.total()))?;
        streams += 1;
    }
    Ok(format!("{streams} streams, N in [100, 50000], T in {{1, 5, 20}}, both slice modes"))
}

// ---------------------------------------------------------------- 2

fn atis_record(x: u8, y: u8, on: bool, ts: u32) -> [u8; 5] {
    let word = (u32::from(on) << 23) | (ts & 0x7F_FFFF);
    [x, y, (word >> 16) as u8, (word >> 8) as u8, word as u8]
}

fn aedat_record(x: u16, y: u16, on: bool, ts: u32) -> [u8; 8] {
    let addr = (u32::from(y) << 8) | (u32::from(x) << 1) | u32::from(on);
    let mut r = [0u8; 8];
    r[..4].copy_from_slice(&addr.to_be_bytes());
    r[4..].copy_from_slice(&ts.to_be_bytes());
    r
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let n = rng.gen_range(1..2000);
        let g = SensorGeometry::new(rng.gen_range(1..=u16::MAX), rng.gen_range(1..=u16::MAX)).unwrap();
        let mut s = random_stream(&mut rng, n, g);
        s.label = if rng.gen() { Some(rng.gen_range(0..1000)) } else { None };
        let bytes = encode_portable(&s);
        let back = decode_portable(&bytes).map_err(|e| format!("stream {i}: {e}"))?;
        ensure(back == s, || format!("stream {i}: decoded stream differs"))?;
        ensure(encode_portable(&back) == bytes, || format!("stream {i}: re-encoding differs"))?;
    }

    // ATIS: 23-bit timestamps with one rollover
    let mut bytes = Vec::new();
    let mut expect = Vec::new();
    let raw = [10u32, 5000, 8_388_600, 3, 40];
    for (k, &ts) in raw.iter().enumerate() {
        let (x, y, on) = ((k * 37 % 304) as u8, (k * 11 % 240) as u8, k % 2 == 0);
        bytes.extend_from_slice(&atis_record(x, y, on, ts));
        let t = if k >= 3 { u64::from(ts) + (1 << 23) } else { u64::from(ts) };
        expect.push(Event::new(u16::from(x), u16::from(y), t, Polarity::from_bit(on)));
    }
    let atis = decode_atis_bin(&bytes, SensorGeometry::ATIS).map_err(|e| e.to_string())?;
    ensure(atis.events == expect, || format!("ATIS fixture decoded to {:?}", atis.events))?;

    // AEDAT 2.0 with a DVS128 address layout
    let mut bytes = b"#!AER-DAT2.0\r\n# synthetic fixture\r\n".to_vec();
    let mut expect = Vec::new();
    for k in 0..50u32 {
        let (x, y, on) = ((k * 7 % 128) as u16, (k * 13 % 128) as u16, k % 3 == 0);
        bytes.extend_from_slice(&aedat_record(x, y, on, 1000 + 17 * k));
        expect.push(Event::new(x, y, u64::from(1000 + 17 * k), Polarity::from_bit(on)));
    }
    let aedat = decode_aedat2(&bytes).map_err(|e| e.to_string())?;
    ensure(aedat.events == expect, || "AEDAT fixture mismatch".into())?;
    Ok("1000 portable round trips bit-exact; ATIS and AEDAT 2.0 fixtures exact".into())
}

// ---------------------------------------------------------------- 3

const EPS: f64 = 1e-5;

fn rebuild(like: &Tensor, v: &[f64]) -> Tensor {
    Tensor::new(like.shape().to_vec(), v.to_vec())
}

/// Worst error over 20 seeds of `check(seed)`.
fn seeds(name: &str, tol: f64, check: impl Fn(u64) -> f64) -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let e = check(seed);
        ensure(e < tol, || format!("{name} seed {seed}: rel. error {e:e} >= {tol:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("{name} {worst:.1e}"))
}

fn conv_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = 1 + (seed % 2) as usize;
    let layer = Conv2d::new(2, 3, 3, stride, 1, &mut rng);
    let x = random_tensor(vec![2, 2, 5, 5], &mut rng);
    let y = layer.forward(&x).unwrap();
    let r = random_projection(y.shape().to_vec(), &mut rng);
    let (dx, g) = layer.backward(&x, &r).unwrap();
    let ex = finite_difference_check(|v| project(&layer.forward(&rebuild(&x, v)).unwrap(), &r), x.data(), dx.data(), EPS);
    let ew = finite_difference_check(
        |v| project(&conv2d_forward(&x, &rebuild(&layer.weight, v), &layer.bias, stride, 1).unwrap(), &r),
        layer.weight.data(),
        g.weight.data(),
        EPS,
    );
    let eb = finite_difference_check(
        |v| project(&conv2d_forward(&x, &layer.weight, &rebuild(&layer.bias, v), stride, 1).unwrap(), &r),
        layer.bias.data(),
        g.bias.data(),
        EPS,
    );
    ex.max(ew).max(eb)
}

fn bn_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bn = BatchNorm2d::new(3);
    bn.gamma = random_tensor(vec![3], &mut rng).map(|v| v + 1.5);
    bn.beta = random_tensor(vec![3], &mut rng);
    let x = random_tensor(vec![2, 3, 3, 3], &mut rng);
    let r = random_projection(x.shape().to_vec(), &mut rng);
    let (_, cache) = bn.clone().forward_train(&x).unwrap();
    let (dx, g) = bn.backward(&cache, &r).unwrap();
    let run = |x: &Tensor, gamma: &Tensor, beta: &Tensor| {
        let mut b = bn.clone();
        b.gamma = gamma.clone();
        b.beta = beta.clone();
        project(&b.forward_train(x).unwrap().0, &r)
    };
    let ex = finite_difference_check(|v| run(&rebuild(&x, v), &bn.gamma, &bn.beta), x.data(), dx.data(), EPS);
    let eg = finite_difference_check(|v| run(&x, &rebuild(&bn.gamma, v), &bn.beta), bn.gamma.data(), g.gamma.data(), EPS);
    let eb = finite_difference_check(|v| run(&x, &bn.gamma, &rebuild(&bn.beta, v)), bn.beta.data(), g.beta.data(), EPS);
    ex.max(eg).max(eb)
}

fn relu_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // bounded away from the kink by more than 10·eps
    let x = random_tensor(vec![4, 9], &mut rng).map(|v| if v.abs() < 10.0 * EPS { v + 0.5 } else { v });
    let r = random_projection(x.shape().to_vec(), &mut rng);
    finite_difference_check(|v| project(&relu(&rebuild(&x, v)), &r), x.data(), relu_backward(&x, &r).data(), EPS)
}

fn sigmoid_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(vec![4, 9], &mut rng).scale(4.0);
    let r = random_projection(x.shape().to_vec(), &mut rng);
    let d = sigmoid_backward(&sigmoid(&x), &r);
    finite_difference_check(|v| project(&sigmoid(&rebuild(&x, v)), &r), x.data(), d.data(), EPS)
}

fn maxpool_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(vec![2, 2, 6, 6], &mut rng);
    let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
    let r = random_projection(y.shape().to_vec(), &mut rng);
    let dx = maxpool2d_backward(x.shape(), &idx, &r);
    finite_difference_check(|v| project(&maxpool2d(&rebuild(&x, v), 2, 2).unwrap().0, &r), x.data(), dx.data(), EPS)
}

fn global_pool_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(vec![2, 3, 4, 4], &mut rng);
    let r = random_projection(vec![2, 3, 1, 1], &mut rng);
    let ea = finite_difference_check(
        |v| project(&global_avg_pool(&rebuild(&x, v)).unwrap(), &r),
        x.data(),
        global_avg_pool_backward(x.shape(), &r).data(),
        EPS,
    );
    let (_, idx) = global_max_pool(&x).unwrap();
    let em = finite_difference_check(
        |v| project(&global_max_pool(&rebuild(&x, v)).unwrap().0, &r),
        x.data(),
        global_max_pool_backward(x.shape(), &idx, &r).data(),
        EPS,
    );
    ea.max(em)
}

fn linear_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Linear::new(5, 4, &mut rng);
    let x = random_tensor(vec![3, 5], &mut rng);
    let r = random_projection(vec![3, 4], &mut rng);
    let (dx, g) = layer.backward(&x, &r).unwrap();
    let with = |w: &Tensor, b: &Tensor| Linear { weight: w.clone(), bias: b.clone() };
    let ex = finite_difference_check(|v| project(&layer.forward(&rebuild(&x, v)).unwrap(), &r), x.data(), dx.data(), EPS);
    let ew = finite_difference_check(
        |v| project(&with(&rebuild(&layer.weight, v), &layer.bias).forward(&x).unwrap(), &r),
        layer.weight.data(),
        g.weight.data(),
        EPS,
    );
    let eb = finite_difference_check(
        |v| project(&with(&layer.weight, &rebuild(&layer.bias, v)).forward(&x).unwrap(), &r),
        layer.bias.data(),
        g.bias.data(),
        EPS,
    );
    ex.max(ew).max(eb)
}

fn ce_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(vec![4, 6], &mut rng).scale(3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let (_, d) = softmax_cross_entropy(&z, &labels).unwrap();
    finite_difference_check(|v| softmax_cross_entropy(&rebuild(&z, v), &labels).unwrap().0, z.data(), d.data(), EPS)
}

fn cam_params_mut(c: &mut ChannelAttention) -> Vec<&mut Tensor> {
    vec![&mut c.fc1.weight, &mut c.fc1.bias, &mut c.fc2.weight, &mut c.fc2.bias]
}

fn cam_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = ChannelAttention::new(6, 2, &mut rng);
    let f = random_tensor(vec![2, 6, 3, 3], &mut rng);
    let r = random_projection(f.shape().to_vec(), &mut rng);
    let (_, _, cache) = cam.forward(&f).unwrap();
    let (df, g) = cam.backward(&cache, &r).unwrap();
    let mut worst = finite_difference_check(
        |v| project(&channel_attention(&rebuild(&f, v), &cam).unwrap().1, &r),
        f.data(),
        df.data(),
        EPS,
    );
    let grads = [&g.fc1.weight, &g.fc1.bias, &g.fc2.weight, &g.fc2.bias];
    let mut probe = cam.clone();
    let originals: Vec<Tensor> = cam_params_mut(&mut probe).into_iter().map(|t| t.clone()).collect();
    for (k, grad) in grads.iter().enumerate() {
        let e = finite_difference_check(
            |v| {
                let mut m = cam.clone();
                *cam_params_mut(&mut m)[k] = rebuild(&originals[k], v);
                project(&channel_attention(&f, &m).unwrap().1, &r)
            },
            originals[k].data(),
            grad.data(),
            EPS,
        );
        worst = worst.max(e);
    }
    worst
}

fn sam_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sam = SpatialAttention::new(3, &mut rng);
    let f = random_tensor(vec![2, 4, 4, 4], &mut rng);
    let r = random_projection(f.shape().to_vec(), &mut rng);
    let (_, _, cache) = sam.forward(&f).unwrap();
    let (df, g) = sam.backward(&cache, &r).unwrap();
    let ef = finite_difference_check(
        |v| project(&spatial_attention(&rebuild(&f, v), &sam).unwrap().1, &r),
        f.data(),
        df.data(),
        EPS,
    );
    let with = |w: &Tensor, b: &Tensor| {
        let mut s = sam.clone();
        s.conv.weight = w.clone();
        s.conv.bias = b.clone();
        s
    };
    let ew = finite_difference_check(
        |v| project(&spatial_attention(&f, &with(&rebuild(&sam.conv.weight, v), &sam.conv.bias)).unwrap().1, &r),
        sam.conv.weight.data(),
        g.weight.data(),
        EPS,
    );
    let eb = finite_difference_check(
        |v| project(&spatial_attention(&f, &with(&sam.conv.weight, &rebuild(&sam.conv.bias, v))).unwrap().1, &r),
        sam.conv.bias.data(),
        g.bias.data(),
        EPS,
    );
    ef.max(ew).max(eb)
}

fn cbam_params_mut(c: &mut Cbam) -> Vec<&mut Tensor> {
    let mut v = cam_params_mut(&mut c.cam);
    v.push(&mut c.sam.conv.weight);
    v.push(&mut c.sam.conv.bias);
    v
}

fn cbam_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = CbamSettings {
        reduction: 2,
        kernel: 3,
        order: if seed.is_multiple_of(2) { CbamOrder::CamThenSam } else { CbamOrder::SamThenCam },
        residual: seed % 4 == 3,
    };
    let block = Cbam::new(4, &settings, &mut rng);
    let f = random_tensor(vec![2, 4, 4, 4], &mut rng);
    let r = random_projection(f.shape().to_vec(), &mut rng);
    let (_, cache) = block.forward_cached(&f).unwrap();
    let (df, g) = block.backward(&cache, &r).unwrap();
    let mut worst = finite_difference_check(|v| project(&block.forward(&rebuild(&f, v)).unwrap(), &r), f.data(), df.data(), EPS);
    let grads = [&g.cam.fc1.weight, &g.cam.fc1.bias, &g.cam.fc2.weight, &g.cam.fc2.bias, &g.sam.weight, &g.sam.bias];
    let mut probe = block.clone();
    let originals: Vec<Tensor> = cbam_params_mut(&mut probe).into_iter().map(|t| t.clone()).collect();
    for (k, grad) in grads.iter().enumerate() {
        let e = finite_difference_check(
            |v| {
                let mut m = block.clone();
                *cbam_params_mut(&mut m)[k] = rebuild(&originals[k], v);
                project(&m.forward(&f).unwrap(), &r)
            },
            originals[k].data(),
            grad.data(),
            EPS,
        );
        worst = worst.max(e);
    }
    worst
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        input_height: 8,
        input_width: 8,
        stage_channels: vec![3, 4],
        convs_per_block: 2,
        cbam_stages: None,
        cbam: CbamSettings { reduction: 2, kernel: 3, ..Default::default() },
        num_classes: 3,
        head: HeadConfig::default(),
    }
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut parts = vec![
        seeds("conv2d", 1e-6, conv_check)?,
        seeds("batchnorm2d", 1e-6, bn_check)?,
        seeds("relu", 1e-6, relu_check)?,
        seeds("sigmoid", 1e-6, sigmoid_check)?,
        seeds("maxpool", 1e-6, maxpool_check)?,
        seeds("global pools", 1e-6, global_pool_check)?,
        seeds("linear", 1e-6, linear_check)?,
        seeds("softmax-CE", 1e-6, ce_check)?,
        seeds("CAM", 1e-5, cam_check)?,
        seeds("SAM", 1e-5, sam_check)?,
        seeds("CBAM", 1e-5, cbam_check)?,
    ];

    // end to end: 20 draws whose ±eps stencils stay on one smooth piece
    let cfg = toy_model_config();
    let (mut passed, mut skipped, mut worst, mut seed) = (0, 0, 0.0f64, 0u64);
    while passed < 20 {
        let model = build_model(&cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let x = random_tensor(vec![2, 2, 8, 8], &mut rng);
        match gradient_check(&model, &x, &[0, 2], EPS).map_err(|e| e.to_string())? {
            Some(e) => {
                ensure(e < 1e-4, || format!("end-to-end seed {seed}: rel. error {e:e}"))?;
                worst = worst.max(e);
                passed += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
        ensure(skipped <= 40, || "too many draws straddle a ReLU/max kink".into())?;
    }
    parts.push(format!("end-to-end {worst:.1e} ({skipped} kink draws skipped)"));
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!("20 seeds each: {} [{secs:.1}s]", parts.join(", ")))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..150 {
        let c = rng.gen_range(1..=16);
        let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let f = random_tensor(vec![rng.gen_range(1..=3), c, h, w], &mut rng).scale(rng.gen_range(0.1..5.0));
        let settings = CbamSettings {
            reduction: rng.gen_range(1..=4),
            kernel: [1, 3, 5, 7][rng.gen_range(0..4)],
            order: if rng.gen() { CbamOrder::CamThenSam } else { CbamOrder::SamThenCam },
            residual: false,
        };
        let block = Cbam::new(c, &settings, &mut rng);
        let (mc, _) = channel_attention(&f, &block.cam).map_err(|e| e.to_string())?;
        let (ms, _) = spatial_attention(&f, &block.sam).map_err(|e| e.to_string())?;
        for g in mc.data().iter().chain(ms.data()) {
            ensure(*g > 0.0 && *g < 1.0, || format!("input {i}: gate {g} outside (0, 1)"))?;
        }
        let out = block.forward(&f).map_err(|e| e.to_string())?;
        ensure(out.shape() == f.shape(), || format!("input {i}: shape {:?}", out.shape()))?;
        for (o, x) in out.data().iter().zip(f.data()) {
            ensure(o.abs() <= x.abs(), || format!("input {i}: |{o}| > |{x}|"))?;
        }
        let zero = Cbam::zeros(c, &settings).forward(&f).map_err(|e| e.to_string())?;
        for (o, x) in zero.data().iter().zip(f.data()) {
            ensure(*o == x / 4.0, || format!("input {i}: zero-parameter block gave {o} for {x}"))?;
        }
    }
    Ok("150 random inputs: gates in (0,1), shape kept, |out| <= |in|, zero params give F/4 exactly".into())
}

// ---------------------------------------------------------------- 5

/// Spreadsheet-style parameter count.
fn analytic_params(cfg: &ModelConfig) -> u64 {
    let mut total = 0u64;
    let mut c_in = cfg.input_channels as u64;
    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        let c = c as u64;
        for j in 0..cfg.convs_per_block {
            let ci = if j == 0 { c_in } else { c };
            total += ci * 9 * c + c; // conv
            total += 2 * c; // batch norm
        }
        if cfg.has_cbam(s) {
            let hid = (c / cfg.cbam.reduction as u64).max(1);
            let k = cfg.cbam.kernel as u64;
            total += (c * hid + hid) + (hid * c + c) + (2 * k * k + 1);
        }
        c_in = c;
    }
    let (h, w) = cfg.final_spatial();
    let mut f = match cfg.head.pool {
        HeadPool::GlobalAvg => c_in,
        HeadPool::Flatten => c_in * (h * w) as u64,
    };
    for &hd in &cfg.head.hidden {
        total += f * hd as u64 + hd as u64;
        f = hd as u64;
    }
    total + f * cfg.num_classes as u64 + cfg.num_classes as u64
}

fn criterion_5() -> Outcome {
    let default = ModelConfig::vgg_cbam(2, 128, 128, 10);
    let configs = vec![
        default.clone(),
        ModelConfig::vgg_original(32, 32, 10),
        ModelConfig { stage_channels: vec![8, 16], cbam: CbamSettings { reduction: 4, kernel: 3, ..Default::default() }, ..ModelConfig::vgg_cbam(8, 16, 16, 2) },
        ModelConfig { stage_channels: vec![16, 32, 32], cbam_stages: Some(vec![1]), convs_per_block: 3, ..ModelConfig::vgg_cbam(2, 24, 40, 101) },
        ModelConfig { head: HeadConfig { pool: HeadPool::Flatten, hidden: vec![64] }, ..ModelConfig::vgg_cbam(2, 64, 64, 10) },
        ModelConfig { stage_channels: vec![4], convs_per_block: 1, ..ModelConfig::vgg_cbam(2, 8, 8, 3) },
    ];
    for cfg in &configs {
        let got = profile(&build_model(cfg, 0).map_err(|e| e.to_string())?).total_params();
        let want = analytic_params(cfg);
        ensure(got == want, || format!("{cfg:?}: counted {got}, analytic {want}"))?;
    }

    // single-layer FLOP cases
    ensure(conv_flops(1, 1, 1, 4, 4) == 32 + 16, || "1x1 conv on 4x4".into())?;
    ensure(linear_flops(512, 10) == 2 * 512 * 10 + 10, || "linear 512->10".into())?;
    let one = ModelConfig {
        stage_channels: vec![5],
        convs_per_block: 1,
        cbam_stages: Some(vec![]),
        ..ModelConfig::vgg_cbam(3, 6, 6, 4)
    };
    let r = profile(&build_model(&one, 0).map_err(|e| e.to_string())?);
    let expect = [
        ("stage0.conv0", 2 * 3 * 9 * 5 * 36 + 5 * 36),
        ("stage0.bn0", 2 * 5 * 36),
        ("stage0.relu0", 5 * 36),
        ("stage0.pool", 3 * 5 * 9),
        ("head.pool", 5 * 9),
        ("head.classifier", 2 * 5 * 4 + 4),
    ];
    for (name, want) in expect {
        let got = r.layer(name).map(|l| l.flops);
        ensure(got == Some(want), || format!("{name}: {got:?} != {want}"))?;
    }

    // delta report: 3-channel original-head preset vs 2-channel framework
    let framework = profile(&build_model(&default, 0).map_err(|e| e.to_string())?);
    let original = profile(&build_model(&ModelConfig::vgg_original(128, 128, 10), 0).map_err(|e| e.to_string())?);
    let rows = compare(&original, &framework);
    let conv0 = rows.iter().find(|r| r.name == "stage0.conv0").ok_or("no stage0.conv0 row")?;
    ensure(conv0.flop_delta() == -(2 * 64 * 9 * 128 * 128), || format!("first conv delta {}", conv0.flop_delta()))?;
    let three = profile(&build_model(&ModelConfig::vgg_cbam(3, 128, 128, 10), 0).map_err(|e| e.to_string())?);
    let d = compare(&three, &framework);
    let only: Vec<_> = d.iter().filter(|r| r.flop_delta() != 0).collect();
    ensure(only.len() == 1 && only[0].flop_delta() == -(2 * 64 * 9 * 128 * 128), || "input-channel delta".into())?;
    let report = render_comparison(&original, &framework);
    ensure(report.lines().count() > 3, || "empty delta report".into())?;
    println!("{report}");
    Ok(format!(
        "{} configs exact; default {} params, {:.1} MFLOPs; vs original-head preset {:+} params ({:+.2}%)",
        configs.len(),
        framework.total_params(),
        framework.mflops(),
        framework.total_params() as i64 - original.total_params() as i64,
        100.0 * (framework.total_params() as f64 / original.total_params() as f64 - 1.0)
    ))
}

// ---------------------------------------------------------------- 6, 7

const TOY_SLICES: usize = 4;

fn bar_set(per_class: usize, seed: u64) -> Dataset {
    let opts = ConvertOptions {
        format: evframe::codec::Format::Evt,
        geometry: BarSettings::default().geometry,
        slices: TOY_SLICES,
        slice_mode: SliceMode::RemainderToLast,
        flip_polarity: false,
    };
    let frames: Vec<_> = bar_dataset(per_class, &BarSettings::default(), seed)
        .into_iter()
        .map(|s| {
            let label = s.label.unwrap() as usize;
            (convert_stream(s, &opts).unwrap().0, label)
        })
        .collect();
    Dataset::from_frames(&frames, vec!["left".into(), "right".into()], ReduceMode::Stack, NormalizeMode::PerSampleMax)
}

fn bar_model() -> ModelConfig {
    ModelConfig {
        input_channels: ReduceMode::Stack.input_channels(TOY_SLICES),
        input_height: 16,
        input_width: 16,
        stage_channels: vec![8, 16],
        convs_per_block: 2,
        cbam_stages: None,
        cbam: CbamSettings { reduction: 4, kernel: 3, ..Default::default() },
        num_classes: 2,
        head: HeadConfig::default(),
    }
}

fn bar_train_config(epochs: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        batch_size: 16,
        epochs,
        seed: 1,
        deterministic: true,
        precision: Precision::F64,
    }
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let train_set = bar_set(32, 100);
    let held_out = bar_set(16, 200);
    let model: Model = build_model(&bar_model(), 1).map_err(|e| e.to_string())?;
    let init = evaluate(&model, &train_set, 64).map_err(|e| e.to_string())?;
    let ln2 = 2f64.ln();
    ensure((init.loss - ln2).abs() / ln2 < 0.05, || format!("initial loss {:.4} vs ln 2", init.loss))?;

    let epochs = 40;
    let mut state = TrainState::new(model);
    let log = train(&mut state, &train_set, Some(&held_out), &bar_train_config(epochs), None, |_| {}).map_err(|e| e.to_string())?;
    let last = |split: &str| log.iter().rev().find(|r| r.split == split).map(|r| r.top1).unwrap_or(0.0);
    let (tr, va) = (last("train"), last("val"));
    let secs = started.elapsed().as_secs_f64();
    ensure(tr >= 0.95, || format!("train top-1 {tr:.3} < 0.95"))?;
    ensure(va >= 0.90, || format!("held-out top-1 {va:.3} < 0.90"))?;
    ensure(secs < 600.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "2x32 bar streams, {epochs} epochs single-threaded: train {tr:.3}, held-out (2x16) {va:.3}, initial loss {:.4} (ln 2 {:+.2}%) [{secs:.1}s]",
        init.loss,
        100.0 * (init.loss / ln2 - 1.0)
    ))
}

fn criterion_7() -> Outcome {
    let train_set = bar_set(8, 300);
    let held_out = bar_set(4, 301);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let rd = RunDir(dir.path().join(run));
        let mut state = TrainState::new(build_model(&bar_model(), 9).map_err(|e| e.to_string())?);
        train(&mut state, &train_set, Some(&held_out), &bar_train_config(5), Some(&rd), |_| {}).map_err(|e| e.to_string())?;
        let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        files.push([read(rd.metrics())?, read(rd.last())?, read(rd.best())?]);
    }
    for (k, name) in ["metrics log", "last checkpoint", "best checkpoint"].iter().enumerate() {
        ensure(files[0][k] == files[1][k], || format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "two seeded single-threaded runs: metrics log ({} B) and checkpoints ({} B) byte-identical",
        files[0][0].len(),
        files[0][1].len()
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("frame integration oracle", criterion_1),
        ("codec round trip", criterion_2),
        ("gradient correctness", criterion_3),
        ("CBAM invariants", criterion_4),
        ("parameter/FLOP accounting", criterion_5),
        ("desk-scale learning", criterion_6),
        ("determinism", criterion_7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("{id} ({name}): PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} ({name}): FAIL - {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
