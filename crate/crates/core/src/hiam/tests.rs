use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nncore::ParameterSet;
use crate::topology::build_graph;

fn random(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn tiny_config(interaction: InteractionMode) -> ModelConfig {
    ModelConfig {
        stations: 5,
        k: 3,
        d: 8,
        heads: 2,
        n: 2,
        m: 2,
        use_uod_long: true,
        use_uod_short: true,
        use_raw_u: false,
        interaction,
        scale_attention: true,
    }
}

fn tiny_graph() -> MetroGraph {
    build_graph(&[(0, 1), (1, 2), (2, 3), (1, 4)], 5).unwrap()
}

fn random_inputs(cfg: &ModelConfig, seed: u64) -> Vec<EncoderInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (cfg.stations, cfg.k);
    (0..cfg.n)
        .map(|_| EncoderInput {
            iod: random(&mut rng, (n, k)),
            u: random(&mut rng, (n, 1)),
            uod_long: random(&mut rng, (n, k)),
            uod_short: random(&mut rng, (n, k)),
            do_: random(&mut rng, (n, k)),
        })
        .collect()
}

/// Gives every bias a random value so the oracle comparison exercises them.
fn randomize_biases(model: &mut Hiam, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.params_mut().values_mut() {
        if v.nrows() == 1 && v.ncols() > 1 {
            v.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

// Independent dense evaluation of the same composition.
struct Oracle<'a> {
    ps: &'a ParameterSet,
    w: Array2<f64>,
    cfg: ModelConfig,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> Array2<f64> {
        self.ps.by_name(name).unwrap_or_else(|| panic!("missing {name}")).clone()
    }

    fn gc(&self, name: &str, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.p(&format!("{name}.self_weight")))
            + self.w.dot(x).dot(&self.p(&format!("{name}.neighbor_weight")))
            + self.p(&format!("{name}.bias"))
    }

    fn gru(&self, name: &str, x: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        let xh = cat(x, h);
        let r = self.gc(&format!("{name}.reset"), &xh).mapv(sigmoid);
        let z = self.gc(&format!("{name}.update"), &xh).mapv(sigmoid);
        let c = self.gc(&format!("{name}.candidate"), &cat(x, &(&r * h))).mapv(f64::tanh);
        &z * h + &(1.0 - &z) * &c
    }

    fn attend(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let (heads, d) = (self.cfg.heads, self.cfg.d);
        let w = d / heads;
        let mut out = Array2::zeros(q.dim());
        for h in 0..heads {
            let cols = ndarray::s![.., h * w..(h + 1) * w];
            let logits = q.slice(cols).dot(&k.slice(cols).t()) / (w as f64).sqrt();
            for i in 0..q.nrows() {
                let max = logits.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = logits.row(i).iter().map(|&x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in 0..w {
                        out[[i, h * w + c]] += ej / s * v[[j, h * w + c]];
                    }
                }
            }
        }
        out
    }

    fn dit(&self, name: &str, od: &Array2<f64>, do_: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let pr = |x: &Array2<f64>, b: &str, part: &str| x.dot(&self.p(&format!("{name}.{b}.{part}")));
        let ctx_od = self.attend(&pr(od, "od", "query"), &pr(do_, "do", "key"), &pr(do_, "do", "value"));
        let ctx_do = self.attend(&pr(do_, "do", "query"), &pr(od, "od", "key"), &pr(od, "od", "value"));
        (od + &pr(&ctx_od, "od", "output"), do_ + &pr(&ctx_do, "do", "output"))
    }

    fn head(&self, name: &str, h: &Array2<f64>) -> Array2<f64> {
        let hidden = h.dot(&self.p(&format!("{name}.hidden.weight"))) + self.p(&format!("{name}.hidden.bias"));
        let a = self.p(&format!("{name}.prelu"))[[0, 0]];
        let act = hidden.mapv(|x| if x > 0.0 { x } else { a * x });
        act.dot(&self.p(&format!("{name}.out.weight"))) + self.p(&format!("{name}.out.bias"))
    }

    fn forward(&self, inputs: &[EncoderInput]) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let z = Array2::<f64>::zeros((self.cfg.stations, self.cfg.d));
        let (mut hl, mut hs, mut hiod, mut hdo1, mut hod2, mut hdo2) =
            (z.clone(), z.clone(), z.clone(), z.clone(), z.clone(), z.clone());
        for x in inputs {
            hl = self.gru("encoder.long", &x.uod_long, &hl);
            hs = self.gru("encoder.short", &x.uod_short, &hs);
            hiod = self.gru("encoder.iod", &x.iod, &hiod);
            let od1 = &hiod
                + &(cat(&hl, &hs).dot(&self.p("encoder.fusion.weight")) + self.p("encoder.fusion.bias"));
            hdo1 = self.gru("encoder.do1", &x.do_, &hdo1);
            let (od1, do1) = self.dit("encoder.interaction1", &od1, &hdo1);
            let od2 = self.gru("encoder.od2", &od1, &hod2);
            let do2 = self.gru("encoder.do2", &do1, &hdo2);
            (hod2, hdo2) = self.dit("encoder.interaction2", &od2, &do2);
        }
        let (mut d_od1, mut d_do1) = (hiod, hdo1);
        let mut prev_od = Array2::zeros((self.cfg.stations, self.cfg.k));
        let mut prev_do = prev_od.clone();
        let (mut ods, mut dos) = (vec![], vec![]);
        for _ in 0..self.cfg.m {
            d_od1 = self.gru("decoder.od1", &prev_od, &d_od1);
            d_do1 = self.gru("decoder.do1", &prev_do, &d_do1);
            let (a, b) = self.dit("decoder.interaction1", &d_od1, &d_do1);
            let od2 = self.gru("decoder.od2", &a, &hod2);
            let do2 = self.gru("decoder.do2", &b, &hdo2);
            (hod2, hdo2) = self.dit("decoder.interaction2", &od2, &do2);
            prev_od = self.head("head.od", &hod2);
            prev_do = self.head("head.do", &hdo2);
            ods.push(prev_od.clone());
            dos.push(prev_do.clone());
        }
        (ods, dos)
    }
}

fn max_diff(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

#[test]
fn forward_matches_dense_oracle() {
    let cfg = tiny_config(InteractionMode::Dit);
    let mut model = Hiam::new(cfg.clone(), 1).unwrap();
    randomize_biases(&mut model, 2);
    let g = tiny_graph();
    let inputs = random_inputs(&cfg, 3);
    let out = model.forward(&g, &inputs).unwrap();
    let oracle = Oracle { ps: model.params(), w: g.weights().clone(), cfg };
    let (od, do_) = oracle.forward(&inputs);
    assert!(max_diff(&out.od, &od) < 1e-12);
    assert!(max_diff(&out.do_, &do_) < 1e-12);
}

#[test]
fn zero_inputs_give_zero_predictions() {
    for mode in InteractionMode::ALL {
        let cfg = tiny_config(mode);
        let model = Hiam::new(cfg.clone(), 4).unwrap();
        let zero = Array2::zeros((5, 3));
        let step = EncoderInput {
            iod: zero.clone(),
            u: Array2::zeros((5, 1)),
            uod_long: zero.clone(),
            uod_short: zero.clone(),
            do_: zero,
        };
        let out = model.forward(&tiny_graph(), &[step.clone(), step]).unwrap();
        assert_eq!(out.od.len(), 2);
        assert!(out.od.iter().chain(&out.do_).all(|p| p.dim() == (5, 3) && p.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn decoder_requires_handoff() {
    let model = Hiam::new(tiny_config(InteractionMode::Dit), 5).unwrap();
    let mut s = model.session(&tiny_graph()).unwrap();
    let z = s.tape.constant(Array2::zeros((5, 3)));
    assert!(matches!(s.decoder_step(z, z), Err(Error::Uninitialized)));
    assert!(matches!(s.handoff(), Err(Error::Uninitialized)));
}

#[test]
fn shape_mismatch_is_reported() {
    let cfg = tiny_config(InteractionMode::Dit);
    let model = Hiam::new(cfg.clone(), 6).unwrap();
    let mut inputs = random_inputs(&cfg, 7);
    assert!(matches!(model.forward(&tiny_graph(), &inputs[..1]), Err(Error::Dimension(_))));
    inputs[0].iod = Array2::zeros((5, 4));
    assert!(matches!(model.forward(&tiny_graph(), &inputs), Err(Error::Dimension(_))));
    let other = build_graph(&[(0, 1)], 4).unwrap();
    assert!(model.session(&other).is_err());
}

#[test]
fn config_rejects_indivisible_heads() {
    let mut cfg = tiny_config(InteractionMode::Dit);
    cfg.heads = 3;
    assert!(matches!(Hiam::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn no_interaction_isolates_branches() {
    let cfg = tiny_config(InteractionMode::None);
    let model = Hiam::new(cfg.clone(), 8).unwrap();
    let g = tiny_graph();
    let base = random_inputs(&cfg, 9);
    let out = model.forward(&g, &base).unwrap();

    let mut do_changed = base.clone();
    for x in &mut do_changed {
        x.do_.mapv_inplace(|v| v + 3.0);
    }
    let a = model.forward(&g, &do_changed).unwrap();
    assert_eq!(a.od, out.od);
    assert_ne!(a.do_, out.do_);

    let mut od_changed = base.clone();
    for x in &mut od_changed {
        x.iod.mapv_inplace(|v| v - 2.0);
        x.uod_long.mapv_inplace(|v| v * 3.0);
    }
    let b = model.forward(&g, &od_changed).unwrap();
    assert_eq!(b.do_, out.do_);
    assert_ne!(b.od, out.od);
}

#[test]
fn dit_couples_branches() {
    let cfg = tiny_config(InteractionMode::Dit);
    let model = Hiam::new(cfg.clone(), 10).unwrap();
    let g = tiny_graph();
    let base = random_inputs(&cfg, 11);
    let mut changed = base.clone();
    changed[0].do_[[2, 1]] += 1.0;
    assert_ne!(model.forward(&g, &base).unwrap().od, model.forward(&g, &changed).unwrap().od);
}

#[test]
fn single_station_interaction_is_local() {
    // Without edges, only the interaction could carry information across stations.
    let g = build_graph(&[], 5).unwrap();
    for (mode, local) in [(InteractionMode::SingleStation, true), (InteractionMode::Dit, false)] {
        let cfg = tiny_config(mode);
        let model = Hiam::new(cfg.clone(), 12).unwrap();
        let base = random_inputs(&cfg, 13);
        let mut changed = base.clone();
        changed[1].do_.row_mut(3).mapv_inplace(|v| v + 1.0);
        let a = model.forward(&g, &base).unwrap();
        let b = model.forward(&g, &changed).unwrap();
        let others_same = (0..5).filter(|&i| i != 3).all(|i| a.od.iter().zip(&b.od).all(|(x, y)| x.row(i) == y.row(i)));
        assert_eq!(others_same, local, "{mode:?}");
        assert!(a.od.iter().zip(&b.od).any(|(x, y)| x.row(3) != y.row(3)));
    }
}

#[test]
fn variant_flags_control_parameters() {
    let cfg = tiny_config(InteractionMode::Dit).with_variant(InputVariant::Iod);
    let model = Hiam::new(cfg.clone(), 14).unwrap();
    assert!(model.params().iter().all(|(n, _)| !n.starts_with("encoder.long")
        && !n.starts_with("encoder.short")
        && !n.starts_with("encoder.fusion")));
    let inputs = random_inputs(&cfg, 15);
    // With no auxiliary branch the OD state is the IOD state alone; UOD inputs are ignored.
    let mut changed = inputs.clone();
    changed[0].uod_long.fill(9.0);
    changed[1].u.fill(9.0);
    let g = tiny_graph();
    assert_eq!(model.forward(&g, &inputs).unwrap(), model.forward(&g, &changed).unwrap());

    let raw = Hiam::new(cfg.with_variant(InputVariant::IodU), 14).unwrap();
    assert_eq!(raw.params().by_name("encoder.raw_u.reset.self_weight").unwrap().dim(), (9, 8));
    assert_ne!(raw.forward(&g, &inputs).unwrap(), raw.forward(&g, &changed).unwrap());
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config(InteractionMode::Dit);
    let a = Hiam::new(cfg.clone(), 16).unwrap();
    let b = Hiam::new(cfg.clone(), 16).unwrap();
    assert_eq!(a.params(), b.params());
    let inputs = random_inputs(&cfg, 17);
    let g = tiny_graph();
    let x = a.forward(&g, &inputs).unwrap();
    let y = b.forward(&g, &inputs).unwrap();
    assert!(x.od.iter().zip(&y.od).all(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits())));
}

#[test]
fn station_permutation_permutes_outputs() {
    let cfg = tiny_config(InteractionMode::Dit);
    let model = Hiam::new(cfg.clone(), 18).unwrap();
    let g = tiny_graph();
    let perm = [2, 4, 0, 1, 3];
    let gp = g.permuted(&perm).unwrap();
    let reorder = |m: &Array2<f64>| {
        let mut p = Array2::zeros(m.dim());
        for (i, &pi) in perm.iter().enumerate() {
            p.row_mut(pi).assign(&m.row(i));
        }
        p
    };
    let inputs = random_inputs(&cfg, 19);
    let permuted: Vec<_> = inputs
        .iter()
        .map(|x| EncoderInput {
            iod: reorder(&x.iod),
            u: reorder(&x.u),
            uod_long: reorder(&x.uod_long),
            uod_short: reorder(&x.uod_short),
            do_: reorder(&x.do_),
        })
        .collect();
    let out = model.forward(&g, &inputs).unwrap();
    let outp = model.forward(&gp, &permuted).unwrap();
    let expected: Vec<_> = out.od.iter().map(reorder).collect();
    assert!(max_diff(&outp.od, &expected) < 1e-12);
    let expected: Vec<_> = out.do_.iter().map(reorder).collect();
    assert!(max_diff(&outp.do_, &expected) < 1e-12);
}

#[test]
fn with_params_round_trips() {
    let cfg = tiny_config(InteractionMode::SingleStation);
    let model = Hiam::new(cfg.clone(), 20).unwrap();
    let copy = Hiam::with_params(cfg.clone(), model.params().clone()).unwrap();
    assert_eq!(copy.params(), model.params());
    let other = Hiam::new(cfg.clone().with_variant(InputVariant::Iod), 20).unwrap();
    assert!(Hiam::with_params(cfg, other.params().clone()).is_err());
}

/// MAE through the full model, checked against central differences on a
/// random subset of parameter entries (the acceptance suite covers all).
#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = tiny_config(InteractionMode::Dit);
    let mut model = Hiam::new(cfg.clone(), 21).unwrap();
    randomize_biases(&mut model, 22);
    let g = tiny_graph();
    let inputs = random_inputs(&cfg, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let targets: Vec<_> = (0..2 * cfg.m).map(|_| random(&mut rng, (5, 3))).collect();
    let loss = |model: &Hiam, grad: bool| {
        let mut s = model.session(&g).unwrap();
        let (od, do_) = s.run(&inputs).unwrap();
        let mut terms = vec![];
        for (p, t) in od.iter().chain(&do_).zip(&targets) {
            let t = s.tape.constant(t.clone());
            terms.push(s.tape.mean_abs_diff(*p, t));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = s.tape.add(total, t);
        }
        let total = s.tape.scale(total, 1.0 / terms.len() as f64);
        let value = s.tape.scalar(total);
        let grads = grad.then(|| {
            let gr = s.tape.backward(total);
            model.params().gradients(&gr, s.param_vars())
        });
        (value, grads)
    };
    let (_, grads) = loss(&model, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let p = rng.random_range(0..model.params().len());
        let shape = model.params().values()[p].dim();
        let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let orig = model.params().values()[p][[r, c]];
        model.params_mut().values_mut()[p][[r, c]] = orig + h;
        let plus = loss(&model, false).0;
        model.params_mut().values_mut()[p][[r, c]] = orig - h;
        let minus = loss(&model, false).0;
        model.params_mut().values_mut()[p][[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[p][[r, c]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
