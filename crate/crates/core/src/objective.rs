//! Minibatch log-likelihood of one parameter sample, with optional reverse
//! accumulation of its gradient. Both the plain ELBO and the gradient engine
//! go through [`sample_loglik`], so their values agree bit for bit.

use rayon::prelude::*;

use crate::model::{gaussian_loglik_unchecked, CalibrationDataset, CalibrationModel, Discrepancy};
use crate::rff::{LayerCache, LayerGrads, RandomFeatureLayer};

/// Points per work unit. Fixed so the reduction order never depends on the
/// thread count.
const CHUNK: usize = 64;

/// Gradient of one sample's scaled log-likelihood.
#[derive(Clone, Debug)]
pub(crate) struct SampleGrads {
    pub theta: Vec<f64>,
    /// One entry per layer in `CalibrationModel::layers` order.
    pub layers: Vec<LayerGrads>,
    pub log_sigma_y: f64,
    pub log_sigma_z: f64,
}

impl SampleGrads {
    pub(crate) fn zeros(model: &CalibrationModel) -> Self {
        let layers = model
            .layers()
            .zip(model.weight_shapes())
            .map(|(l, (rows, cols))| LayerGrads::zeros(rows, cols, l.input_dim()))
            .collect();
        SampleGrads {
            theta: vec![0.0; model.d2()],
            layers,
            log_sigma_y: 0.0,
            log_sigma_z: 0.0,
        }
    }

    fn add_assign(&mut self, other: &SampleGrads) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += b;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        self.log_sigma_y += other.log_sigma_y;
        self.log_sigma_z += other.log_sigma_z;
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Field,
    Sim,
}

struct Ctx<'a> {
    model: &'a CalibrationModel,
    data: &'a CalibrationDataset,
    theta: &'a [f64],
    /// Column-major weight matrices in layer order.
    weights: &'a [Vec<f64>],
    scale_field: f64,
    scale_sim: f64,
}

/// Scratch buffers reused across the points of one chunk.
struct Workspace {
    caches: Vec<LayerCache>,
    disc_cache: LayerCache,
    hidden: Vec<Vec<f64>>,
    u0: Vec<f64>,
    layer_in: Vec<f64>,
    f: Vec<f64>,
    disc_out: Vec<f64>,
    obs: Vec<f64>,
    eta_bar: Vec<f64>,
    out_bar: Vec<f64>,
    in_bar: Vec<f64>,
    u0_bar: Vec<f64>,
    phi_bar: Vec<f64>,
}

impl Workspace {
    fn new(model: &CalibrationModel) -> Self {
        let hidden = model
            .emulator
            .hidden_dims()
            .into_iter()
            .map(|h| vec![0.0; h])
            .collect();
        Workspace {
            caches: vec![LayerCache::default(); model.n_emulator_layers()],
            disc_cache: LayerCache::default(),
            hidden,
            u0: Vec::new(),
            layer_in: Vec::new(),
            f: vec![0.0; model.d_out()],
            disc_out: vec![0.0; model.d_out()],
            obs: vec![0.0; model.d_out()],
            eta_bar: vec![0.0; model.d_out()],
            out_bar: Vec::new(),
            in_bar: Vec::new(),
            u0_bar: Vec::new(),
            phi_bar: Vec::new(),
        }
    }
}

impl Ctx<'_> {
    fn emulator_forward(&self, ws: &mut Workspace) {
        let emu = &self.model.emulator;
        let concat = emu.config.concat_input;
        for (l, layer) in emu.layers.iter().enumerate() {
            ws.layer_in.clear();
            if l == 0 {
                ws.layer_in.extend_from_slice(&ws.u0);
            } else {
                ws.layer_in.extend_from_slice(&ws.hidden[l - 1]);
                if concat {
                    ws.layer_in.extend_from_slice(&ws.u0);
                }
            }
            let (_, rest) = ws.hidden.split_at_mut(l);
            layer.forward(&ws.layer_in, &self.weights[l], &mut ws.caches[l], &mut rest[0]);
        }
    }

    /// Backpropagates `ws.eta_bar` through the emulator. Leaves the gradient
    /// with respect to the emulator input in `ws.u0_bar`.
    fn emulator_backward(&self, ws: &mut Workspace, grads: &mut SampleGrads) {
        let emu = &self.model.emulator;
        let concat = emu.config.concat_input;
        let d_in = ws.u0.len();
        ws.u0_bar.clear();
        ws.u0_bar.resize(d_in, 0.0);
        ws.out_bar.clear();
        ws.out_bar.extend_from_slice(&ws.eta_bar);
        for l in (0..emu.layers.len()).rev() {
            let layer = &emu.layers[l];
            ws.in_bar.clear();
            ws.in_bar.resize(layer.input_dim(), 0.0);
            layer.backward(
                &ws.caches[l],
                &self.weights[l],
                &ws.out_bar,
                &mut grads.layers[l],
                &mut ws.in_bar,
                &mut ws.phi_bar,
            );
            if l == 0 {
                for (a, b) in ws.u0_bar.iter_mut().zip(&ws.in_bar) {
                    *a += b;
                }
            } else {
                let h = ws.hidden[l - 1].len();
                if concat {
                    for (a, b) in ws.u0_bar.iter_mut().zip(&ws.in_bar[h..]) {
                        *a += b;
                    }
                }
                ws.out_bar.clear();
                ws.out_bar.extend_from_slice(&ws.in_bar[..h]);
            }
        }
    }

    fn field_point(&self, j: usize, ws: &mut Workspace, grads: Option<&mut SampleGrads>) -> f64 {
        let model = self.model;
        let d1 = model.d1();
        ws.u0.clear();
        ws.u0.extend(self.data.x.row(j).iter());
        ws.u0.extend_from_slice(self.theta);
        self.emulator_forward(ws);
        let last = ws.hidden.len() - 1;
        ws.f.copy_from_slice(&ws.hidden[last]);

        let disc_idx = model.n_emulator_layers();
        match &model.discrepancy {
            Discrepancy::None => {}
            Discrepancy::Additive(layer) => {
                ws.layer_in.clear();
                ws.layer_in.extend_from_slice(&ws.u0[..d1]);
                layer.forward(&ws.layer_in, &self.weights[disc_idx], &mut ws.disc_cache, &mut ws.disc_out);
                for (f, d) in ws.f.iter_mut().zip(&ws.disc_out) {
                    *f += d;
                }
            }
            Discrepancy::General(layer) => {
                ws.layer_in.clear();
                ws.layer_in.extend_from_slice(&ws.hidden[last]);
                ws.layer_in.extend_from_slice(&ws.u0[..d1]);
                layer.forward(&ws.layer_in, &self.weights[disc_idx], &mut ws.disc_cache, &mut ws.disc_out);
                for (f, d) in ws.f.iter_mut().zip(&ws.disc_out) {
                    *f += d;
                }
            }
        }

        for (o, v) in ws.obs.iter_mut().zip(self.data.y.row(j).iter()) {
            *o = *v;
        }
        let sigma = model.noise.sigma_y;
        let ll = gaussian_loglik_unchecked(&ws.obs, &ws.f, sigma);

        if let Some(grads) = grads {
            let inv_var = 1.0 / (sigma * sigma);
            let mut log_sigma_bar = 0.0;
            for (k, (o, f)) in ws.obs.iter().zip(&ws.f).enumerate() {
                let r = o - f;
                ws.eta_bar[k] = self.scale_field * r * inv_var;
                log_sigma_bar += r * r * inv_var - 1.0;
            }
            grads.log_sigma_y += self.scale_field * log_sigma_bar;

            // eta_bar currently holds f_bar.
            match &model.discrepancy {
                Discrepancy::None => {}
                Discrepancy::Additive(layer) => {
                    self.disc_backward(layer, ws, grads);
                }
                Discrepancy::General(layer) => {
                    self.disc_backward(layer, ws, grads);
                    // Skip connection plus the warp's dependence on eta.
                    for (e, b) in ws.eta_bar.iter_mut().zip(&ws.in_bar) {
                        *e += b;
                    }
                }
            }
            self.emulator_backward(ws, grads);
            for (g, b) in grads.theta.iter_mut().zip(&ws.u0_bar[d1..]) {
                *g += b;
            }
        }
        ll
    }

    fn disc_backward(&self, layer: &RandomFeatureLayer, ws: &mut Workspace, grads: &mut SampleGrads) {
        let disc_idx = self.model.n_emulator_layers();
        ws.in_bar.clear();
        ws.in_bar.resize(layer.input_dim(), 0.0);
        layer.backward(
            &ws.disc_cache,
            &self.weights[disc_idx],
            &ws.eta_bar,
            &mut grads.layers[disc_idx],
            &mut ws.in_bar,
            &mut ws.phi_bar,
        );
    }

    fn sim_point(&self, j: usize, ws: &mut Workspace, grads: Option<&mut SampleGrads>) -> f64 {
        ws.u0.clear();
        ws.u0.extend(self.data.x_sim.row(j).iter());
        ws.u0.extend(self.data.t.row(j).iter());
        self.emulator_forward(ws);
        let last = ws.hidden.len() - 1;
        for (o, v) in ws.obs.iter_mut().zip(self.data.z.row(j).iter()) {
            *o = *v;
        }
        let sigma = self.model.noise.sigma_z;
        let ll = gaussian_loglik_unchecked(&ws.obs, &ws.hidden[last], sigma);
        if let Some(grads) = grads {
            let inv_var = 1.0 / (sigma * sigma);
            let mut log_sigma_bar = 0.0;
            for (k, (o, e)) in ws.obs.iter().zip(&ws.hidden[last]).enumerate() {
                let r = o - e;
                ws.eta_bar[k] = self.scale_sim * r * inv_var;
                log_sigma_bar += r * r * inv_var - 1.0;
            }
            grads.log_sigma_z += self.scale_sim * log_sigma_bar;
            self.emulator_backward(ws, grads);
        }
        ll
    }

    fn chunk(&self, block: Block, idx: &[usize], want_grad: bool) -> (f64, Option<SampleGrads>) {
        let mut ws = Workspace::new(self.model);
        let mut grads = want_grad.then(|| SampleGrads::zeros(self.model));
        let mut total = 0.0;
        for &j in idx {
            total += match block {
                Block::Field => self.field_point(j, &mut ws, grads.as_mut()),
                Block::Sim => self.sim_point(j, &mut ws, grads.as_mut()),
            };
        }
        (total, grads)
    }
}

/// `(n / m_f) * sum_field log p(y|f) + (N / m_s) * sum_sim log p(z|eta)` for a
/// single draw of `theta` and the weights. Index sets must be validated by the
/// caller.
pub(crate) fn sample_loglik(
    model: &CalibrationModel,
    data: &CalibrationDataset,
    theta: &[f64],
    weights: &[Vec<f64>],
    field_idx: &[usize],
    sim_idx: &[usize],
    want_grad: bool,
) -> (f64, Option<SampleGrads>) {
    let ctx = Ctx {
        model,
        data,
        theta,
        weights,
        scale_field: data.n_field() as f64 / field_idx.len() as f64,
        scale_sim: data.n_sim() as f64 / sim_idx.len() as f64,
    };
    let work: Vec<(Block, &[usize])> = field_idx
        .chunks(CHUNK)
        .map(|c| (Block::Field, c))
        .chain(sim_idx.chunks(CHUNK).map(|c| (Block::Sim, c)))
        .collect();
    let parts: Vec<(Block, f64, Option<SampleGrads>)> = if work.len() > 1 {
        work.par_iter()
            .map(|(b, idx)| {
                let (v, g) = ctx.chunk(*b, idx, want_grad);
                (*b, v, g)
            })
            .collect()
    } else {
        work.iter()
            .map(|(b, idx)| {
                let (v, g) = ctx.chunk(*b, idx, want_grad);
                (*b, v, g)
            })
            .collect()
    };

    let mut field_sum = 0.0;
    let mut sim_sum = 0.0;
    let mut grads = want_grad.then(|| SampleGrads::zeros(model));
    for (block, v, g) in &parts {
        match block {
            Block::Field => field_sum += v,
            Block::Sim => sim_sum += v,
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_assign(g);
        }
    }
    (ctx.scale_field * field_sum + ctx.scale_sim * sim_sum, grads)
}
