//! Module-vs-oracle comparisons shared by the integration tests and the
//! acceptance runner. Each returns the worst absolute difference seen.

use hvi_enhance::attention::AttentionConfig;
use hvi_enhance::diem::{Cdem, Mafm};
use hvi_enhance::hvi::{HviImage, HviVars};
use hvi_enhance::loss::{ccl_total, LossConfig};
use hvi_enhance::nn::Module;
use hvi_enhance::params::{Initializer, ParamRegistry};
use hvi_enhance::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs, random_tensor, randomize, Img};

const CHANNELS: usize = 8;

fn registry(m: &impl Module, seed: u64) -> ParamRegistry<f64> {
    let mut init = Initializer::new(seed);
    m.declare(&mut init).unwrap();
    let mut p = init.finish().cast();
    randomize(&mut p, seed.wrapping_mul(31).wrapping_add(7));
    p
}

fn sizes(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.gen_range(1..=2), CHANNELS, rng.gen_range(4..=9), rng.gen_range(4..=9)]
}

pub fn mafm_worst(trials: u64) -> f64 {
    let cfg = AttentionConfig::new(CHANNELS);
    let m = Mafm::new("m", &cfg);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let p = registry(&m, t);
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let shape = sizes(&mut rng);
        let a = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let b = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let y = m.forward(&p.bind_frozen(&g), g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let o = super::mafm(&p, "m", &Img::from_tensor(&a), &Img::from_tensor(&b));
        worst = worst.max(max_abs(y.value().data(), &o.d));
    }
    worst
}

pub fn cdem_worst(trials: u64) -> f64 {
    let cfg = AttentionConfig::new(CHANNELS);
    let m = Cdem::new("c", &cfg).unwrap();
    let mut worst = 0.0f64;
    for t in 0..trials {
        let p = registry(&m, 1000 + t);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let shape = sizes(&mut rng);
        let a = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let b = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let y = m
            .cdem_forward(&p.bind_frozen(&g), g.constant(a.clone()), g.constant(b.clone()))
            .unwrap();
        let o = super::cdem(&p, "c", cfg.heads, &Img::from_tensor(&a), &Img::from_tensor(&b));
        worst = worst.max(max_abs(y.value().data(), &o.d));
    }
    worst
}

/// Worst difference over every reported scalar of the loss breakdown.
pub fn ccl_worst(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + t);
        let b = rng.gen_range(1..=3);
        let shape = [b, 1, rng.gen_range(2..=8), rng.gen_range(2..=8)];
        let mut plane = |lo, hi| random_tensor(&shape, lo, hi, &mut rng);
        let pred = HviImage { h: plane(-1.0, 1.0), v: plane(-1.0, 1.0), i: plane(0.0, 1.0) };
        let gt = HviImage { h: plane(-1.0, 1.0), v: plane(-1.0, 1.0), i: plane(0.0, 1.0) };
        let g = Graph::<f64>::new();
        let (total, br) = ccl_total(
            &HviVars::constant(&g, &pred),
            &HviVars::constant(&g, &gt),
            &LossConfig::default(),
        )
        .unwrap();
        let (l_i, w_h, w_v, l_ihv, l_hv, o_total) = super::ccl(
            [pred.h.data(), pred.v.data(), pred.i.data()],
            [gt.h.data(), gt.v.data(), gt.i.data()],
            b,
        );
        let got = [br.l_i, br.w_h, br.w_v, br.l_ihv, br.l_hv, br.total, total.item()];
        let want = [l_i, w_h, w_v, l_ihv, l_hv, o_total, o_total];
        worst = worst.max(max_abs(&got, &want));
    }
    worst
}
