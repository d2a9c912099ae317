//! Central finite-difference checks of the APPLE losses on a tiny instance.

use fairseg::apple::{
    loss_discriminator, loss_fair, loss_generator, loss_seg, AttributeDiscriminator, DiscriminatorConfig,
    GeneratorConfig, PerturbationGenerator,
};
use fairseg::segmentor::{LatentEmbedding, LatentVars, UNet, UNetConfig};
use fairseg_nn::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Tiny instance: embedding `[2, 4, 2, 2]`, K = 2.
pub struct Tiny {
    pub seg: UNet,
    pub gp: PerturbationGenerator,
    pub dp: AttributeDiscriminator,
    pub latent: LatentEmbedding,
    pub mask: Vec<usize>,
    pub attrs: Vec<usize>,
}

fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = ps.ids().filter(|&id| ps.is_trainable(id)).collect();
    for id in ids {
        for v in ps.get_mut(id).unwrap().data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn tiny() -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = UNetConfig {
        in_channels: 1,
        num_classes: 2,
        channels: vec![2, 4],
    };
    let mut seg = UNet::new(cfg, 1).unwrap();
    seg.freeze();
    let gcfg = GeneratorConfig {
        widths: [3, 3, 4],
        bottleneck_blocks: 1,
    };
    let mut gp = PerturbationGenerator::new(gcfg, 4, (2, 2), 2).unwrap();
    randomize(gp.params_mut(), &mut rng, 0.3);
    let mut dp = AttributeDiscriminator::new(DiscriminatorConfig { hidden: 5 }, 4, 2, 3).unwrap();
    randomize(dp.params_mut(), &mut rng, 0.3);
    let images = random(&[2, 1, 4, 4], &mut rng);
    let latent = seg.embed(&images).unwrap();
    let mask = (0..32).map(|_| rng.random_range(0..2)).collect();
    Tiny {
        seg,
        gp,
        dp,
        latent,
        mask,
        attrs: vec![0, 1],
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Which {
    Disc,
    Seg,
    Fair,
    Gen,
}

const ALPHA: f64 = 0.1;
const BETA: f64 = 1.0;

/// Loss value with `gp`/`dp` parameters tracked as requested; returns the
/// loss and the gradients of the tracked network.
pub fn eval(t: &Tiny, which: Which, wrt_generator: bool) -> (f64, Vec<Option<Tensor>>) {
    let g = Graph::new();
    let pg = t.gp.params().bind(&g, wrt_generator);
    let pd = t.dp.params().bind(&g, !wrt_generator);
    let ps = t.seg.params().bind(&g, true);
    let fo = LatentVars::constant(&g, &t.latent);
    let fp = t.gp.perturb(&pg, &fo).unwrap();
    let (dlogits, _) = t.dp.forward_train(&pd, fp.tensor).unwrap();
    let seg = || loss_seg(t.seg.decode(&ps, &fp).unwrap(), &t.mask);
    let loss = match which {
        Which::Disc => loss_discriminator(dlogits, &t.attrs),
        Which::Seg => seg(),
        Which::Fair => loss_fair(dlogits, &t.attrs, ALPHA),
        Which::Gen => loss_generator(seg(), loss_fair(dlogits, &t.attrs, ALPHA), BETA),
    };
    let value = loss.item();
    let mut grads = g.backward(loss);
    let out = if wrt_generator { pg.grads(&mut grads) } else { pd.grads(&mut grads) };
    (value, out)
}

fn nudge(t: &mut Tiny, wrt_generator: bool, id: fairseg_nn::ParamId, j: usize, delta: f64) {
    let ps = if wrt_generator { t.gp.params_mut() } else { t.dp.params_mut() };
    ps.get_mut(id).unwrap().data_mut()[j] += delta;
}

/// Worst relative deviation between analytic and central-difference
/// gradients over every trainable parameter of the tracked network, and the
/// number of entries compared.
pub fn worst_relative_error(which: Which, wrt_generator: bool) -> (f64, usize) {
    let mut t = tiny();
    let (_, analytic) = eval(&t, which, wrt_generator);
    let h = 1e-6;
    let ids: Vec<_> = {
        let ps = if wrt_generator { t.gp.params() } else { t.dp.params() };
        ps.ids().enumerate().filter(|&(_, id)| ps.is_trainable(id)).collect()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (slot, id) in ids {
        let n = {
            let ps = if wrt_generator { t.gp.params() } else { t.dp.params() };
            ps.get(id).numel()
        };
        for j in 0..n {
            nudge(&mut t, wrt_generator, id, j, h);
            let up = eval(&t, which, wrt_generator).0;
            nudge(&mut t, wrt_generator, id, j, -2.0 * h);
            let down = eval(&t, which, wrt_generator).0;
            nudge(&mut t, wrt_generator, id, j, h);
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[slot].as_ref().map_or(0.0, |g| g.data()[j]);
            let scale = numeric.abs().max(exact.abs()).max(1e-3);
            worst = worst.max((numeric - exact).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}
