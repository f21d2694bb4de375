use buctd::nets::attention::{ChannelAttention, PositionAttention};
use buctd::nets::tokens::CONDITION_TOKEN_DIM;
use buctd::nets::{grad_check, Arch, CtdNet, CtdSpec, GradCheckModule, ParamStore, PreNet, Tape, Tensor, TokenEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_query_gives_uniform_position_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let m = PositionAttention::new(&mut store, "pa", 4, 3, &mut rng);
    m.query.zero(&mut store);
    let mut tape = Tape::new(&store);
    let f = tape.constant(random(&[4, 3, 3], &mut rng));
    let c = tape.constant(random(&[3, 3, 3], &mut rng));
    let (out, t) = m.forward_traced(&mut tape, f, c).unwrap();
    assert_eq!(tape.shape(out), &[4, 3, 3]);
    let s = tape.value(t.s).to_f64_vec();
    assert!(s.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    let v = tape.value(t.v).to_f64_vec();
    let p = tape.value(t.p).to_f64_vec();
    for ch in 0..4 {
        let mean = v[ch * 9..ch * 9 + 9].iter().sum::<f64>() / 9.0;
        assert!(p[ch * 9..ch * 9 + 9].iter().all(|&x| (x - mean).abs() < 1e-12));
    }
}

#[test]
fn two_way_softmax_row() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::from_vec(&[1, 2], vec![3f64.ln(), 0.0]));
    let s = tape.softmax_rows(x);
    let v = tape.value(s).to_f64_vec();
    assert!((v[0] - 0.75).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
}

#[test]
fn equal_channel_logits_average_the_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let m = ChannelAttention::new(&mut store, "ca", 2, 3, &mut rng);
    m.cond_conv.zero(&mut store);
    let mut tape = Tape::new(&store);
    let f = tape.constant(random(&[2, 2, 3], &mut rng));
    let c = tape.constant(random(&[3, 2, 3], &mut rng));
    let (out, t) = m.forward_traced(&mut tape, f, c).unwrap();
    assert_eq!(tape.shape(out), &[2, 2, 3]);
    assert!(tape.value(t.x).to_f64_vec().iter().all(|&v| v == 0.5));
    let fv = tape.value(f).to_f64_vec();
    let e = tape.value(t.e).to_f64_vec();
    for n in 0..6 {
        let mean = 0.5 * (fv[n] + fv[6 + n]);
        assert!((e[n] - mean).abs() < 1e-12 && (e[6 + n] - mean).abs() < 1e-12);
    }
}

/// Keeps only the centre tap of a 3x3 conv, so it acts on each position alone.
fn centre_only(store: &mut ParamStore<f64>, conv: &buctd::nets::layers::Conv) {
    let w = store.get_mut(conv.w);
    let s = w.shape().to_vec();
    let (kh, kw) = (s[2], s[3]);
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if i % (kh * kw) != (kh / 2) * kw + kw / 2 {
            *v = 0.0;
        }
    }
}

#[test]
fn position_attention_commutes_with_position_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let m = PositionAttention::new(&mut store, "pa", 4, 2, &mut rng);
    centre_only(&mut store, &m.feat_conv);
    centre_only(&mut store, &m.cond_conv);
    let (c, cc, h, w) = (4, 2, 3, 4);
    let n = h * w;
    let f = random(&[c, h, w], &mut rng);
    let g = random(&[cc, h, w], &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let permute = |t: &Tensor<f64>, ch: usize| {
        let d = t.data();
        let mut out = vec![0.0; ch * n];
        for k in 0..ch {
            for (dst, &src) in perm.iter().enumerate() {
                out[k * n + dst] = d[k * n + src];
            }
        }
        Tensor::from_vec(&[ch, h, w], out)
    };
    let run = |f: Tensor<f64>, g: Tensor<f64>| {
        let mut tape = Tape::new(&store);
        let (f, g) = (tape.constant(f), tape.constant(g));
        let (_, t) = m.forward_traced(&mut tape, f, g).unwrap();
        tape.value(t.p).clone()
    };
    let p = run(f.clone(), g.clone());
    let pp = run(permute(&f, c), permute(&g, cc));
    assert!(max_abs(permute(&p, c).data(), pp.data()) < 1e-12);
}

#[test]
fn prenet_identity_shape_and_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let m = PreNet::new(&mut store, "pre", 3, 3, 8, &mut rng);
    let img = random(&[3, 16, 16], &mut rng);
    let run = |store: &ParamStore<f64>, cond: Tensor<f64>| {
        let mut tape = Tape::new(store);
        let (i, c) = (tape.constant(img.clone()), tape.constant(cond));
        let fused = m.forward(&mut tape, i, c).unwrap();
        let alone = m.image_branch(&mut tape, i);
        (tape.value(fused).clone(), tape.value(alone).clone())
    };
    let mut zero_bias = store.clone();
    if let Some(b) = m.cond.b {
        zero_bias.get_mut(b).data_mut().fill(0.0);
    }
    let (fused, alone) = run(&zero_bias, Tensor::zeros(&[3, 16, 16]));
    assert_eq!(fused.shape(), &[8, 4, 4]);
    assert_eq!(fused.data(), alone.data());

    let (a, _) = run(&store, random(&[3, 16, 16], &mut rng));
    let (b, _) = run(&store, random(&[3, 16, 16], &mut rng));
    assert!(max_abs(a.data(), b.data()) > 1e-6);
}

#[test]
fn condition_tokens_double_the_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let e = TokenEncoder::new(&mut store, "tok", CONDITION_TOKEN_DIM, 3, &mut rng);
    assert_eq!(CONDITION_TOKEN_DIM, 16);
    if let Some(b) = e.cond_proj.b {
        store.get_mut(b).data_mut().fill(0.0);
    }
    let mut tape = Tape::new(&store);
    let img = tape.constant(random(&[16, 48], &mut rng));
    let cond = tape.constant(Tensor::zeros(&[3, 8, 6]));
    let seq = e.condition_tokens(&mut tape, cond, img, (8, 6)).unwrap();
    assert_eq!(tape.shape(seq), &[16, 96]);
    let v = tape.value(seq).to_f64_vec();
    for d in 0..16 {
        assert!(v[d * 96 + 48..d * 96 + 96].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn ctd_output_shape_and_determinism() {
    for arch in [Arch::Coam, Arch::Prenet, Arch::Tokens, Arch::Plain] {
        let spec = CtdSpec {
            arch,
            insert_stage: 2,
            num_keypoints: 5,
            image_channels: 3,
            cond_channels: 3,
        };
        let out = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f32>::new();
            let net = CtdNet::new(spec, &mut store, &mut rng).unwrap();
            let img = random(&[3, 64, 64], &mut rng).cast::<f32>();
            let cond = random(&[3, 64, 64], &mut rng).cast::<f32>();
            let mut tape = Tape::new(&store);
            let (i, c) = (tape.constant(img), tape.constant(cond));
            let y = net.forward(&mut tape, i, Some(c)).unwrap();
            (tape.shape(y).to_vec(), tape.value(y).data().to_vec())
        };
        let (shape, a) = out(7);
        assert_eq!(shape, vec![5, 16, 16], "{arch:?}");
        assert_eq!(a, out(7).1, "{arch:?}");
    }
}

#[test]
fn linear_map_checks_at_the_numerical_floor() {
    let r = grad_check(GradCheckModule::LinearProjection, 1e-4, 1).unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
    assert!(!r.groups.is_empty());
    assert_eq!(r.worst_group().worst_rel_error, r.max_rel_error);
}
