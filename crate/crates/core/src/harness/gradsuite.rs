//! Registry of finite-difference checks: every tape op plus the composite
//! blocks on micro-instances.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{random_input, GradCheck, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::attention::{init_attention, init_relative_bias, multi_head_attention};
use crate::model::backbone::{self, FeatureMap};
use crate::model::{head, sstb, tab, Maniqa, ModelConfig, SstbParams, TabTemperature};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

type CaseFn = Box<dyn Fn(&GradCheck) -> Result<GradCheckReport> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    run: CaseFn,
    corrupt: Option<f64>,
}

impl GradCase {
    pub fn new(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static) -> Self {
        let owned = name.to_string();
        GradCase {
            name: name.to_string(),
            run: Box::new(move |chk| chk.measure(&owned, &inputs, &f)),
            corrupt: None,
        }
    }

    /// A block whose parameters are perturbed along with `inputs`.
    pub fn with_params(
        name: &str,
        store: ParamStore,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Ctx, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        let names: Vec<String> = store.names().cloned().collect();
        let n_inputs = inputs.len();
        let mut all = inputs;
        all.extend(store.iter().map(|(_, t)| t.clone()));
        GradCase::new(name, all, move |g: &mut Graph, vars: &[Var]| {
            let mut ctx = Ctx::adopt(std::mem::take(g), &store, false);
            for (name, &v) in names.iter().zip(&vars[n_inputs..]) {
                ctx.bind(name, v);
            }
            let out = f(&mut ctx, &vars[..n_inputs]);
            *g = ctx.into_graph();
            out
        })
    }

    /// Scales the analytic gradient before comparison, simulating a bug.
    pub fn corrupted(mut self, factor: f64) -> Self {
        self.corrupt = Some(factor);
        self
    }

    pub fn run(&self, checker: &GradCheck) -> Result<GradCheckReport> {
        match self.corrupt {
            Some(factor) => (self.run)(&GradCheck {
                corrupt: factor,
                ..checker.clone()
            }),
            None => (self.run)(checker),
        }
    }
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = random_input(shape, seed);
    let v = t.values().iter().map(|x| 1.5 + x).collect();
    Tensor::new(shape.to_vec(), v).expect("same shape")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every differentiable op of the tape.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("matmul", vec![random_input(&[3, 4], 1), random_input(&[4, 2], 2)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        GradCase::new("bmm", vec![random_input(&[2, 3, 4], 3), random_input(&[2, 4, 2], 4)], |g, v| {
            g.bmm(v[0], v[1])
        }),
        GradCase::new(
            "linear",
            vec![random_input(&[3, 4], 5), random_input(&[2, 4], 6), random_input(&[2], 7)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        GradCase::new("add", vec![random_input(&[5], 8), random_input(&[5], 9)], |g, v| g.add(v[0], v[1])),
        GradCase::new("sub", vec![random_input(&[5], 10), random_input(&[5], 11)], |g, v| g.sub(v[0], v[1])),
        GradCase::new("mul", vec![random_input(&[5], 12), random_input(&[5], 13)], |g, v| g.mul(v[0], v[1])),
        GradCase::new("div", vec![random_input(&[5], 14), positive(&[5], 15)], |g, v| g.div(v[0], v[1])),
        GradCase::new("scale", vec![random_input(&[5], 16)], |g, v| Ok(g.scale(v[0], -2.5))),
        GradCase::new("softmax_last", vec![random_input(&[3, 5], 17)], |g, v| g.softmax(v[0], 1)),
        GradCase::new("softmax_first", vec![random_input(&[3, 5], 18)], |g, v| g.softmax(v[0], 0)),
        GradCase::new(
            "layer_norm",
            vec![random_input(&[3, 6], 19), random_input(&[6], 20), random_input(&[6], 21)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        GradCase::new("gelu", vec![random_input(&[7], 22)], |g, v| Ok(g.gelu(v[0]))),
        GradCase::new("sigmoid", vec![random_input(&[7], 23)], |g, v| Ok(g.sigmoid(v[0]))),
        GradCase::new(
            "conv2d",
            vec![random_input(&[1, 2, 5, 5], 24), random_input(&[3, 2, 3, 3], 25), random_input(&[3], 26)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
        ),
        GradCase::new("gather", vec![random_input(&[6], 27)], |g, v| {
            g.gather(v[0], vec![5, 0, 0, 3, 2, 5, 1], vec![7])
        }),
        GradCase::new("transpose", vec![random_input(&[3, 4], 28)], |g, v| g.transpose(v[0])),
        GradCase::new("reshape", vec![random_input(&[3, 4], 29)], |g, v| g.reshape(v[0], vec![2, 6])),
        GradCase::new("concat", vec![random_input(&[2, 3], 30), random_input(&[2, 1], 31)], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        GradCase::new("sum", vec![random_input(&[4], 32)], |g, v| Ok(g.sum(v[0]))),
        GradCase::new("mean", vec![random_input(&[4], 33)], |g, v| Ok(g.mean(v[0]))),
        GradCase::new(
            "composite",
            vec![random_input(&[2, 3], 34), random_input(&[3, 3], 35)],
            |g, v| {
                let a = g.matmul(v[0], v[1])?;
                let b = g.gelu(a);
                let c = g.mul(b, a)?;
                g.softmax(c, 1)
            },
        ),
    ]
}

/// Attention, TAB, Swin layers, SSTB, head, and the micro-config model.
pub fn block_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    init_relative_bias(&mut store, "attn", 2, 2);
    init_attention(&mut store, "attn", 4, &mut rng(40));
    // non-zero bias table so its gradient path is exercised
    for (i, v) in store.get_mut("attn.rel_bias").unwrap().values_mut().iter_mut().enumerate() {
        *v = 0.1 * (i as f64).sin();
    }
    let mask = crate::model::window::shifted_window_mask(4, 4, 2, 1).unwrap();
    cases.push(GradCase::with_params(
        "window_msa",
        store,
        vec![random_input(&[16, 4], 41)],
        move |ctx, v| Ok(multi_head_attention(ctx, "attn", v[0], 4, 2, Some(&mask), Some(2))?.out),
    ));

    let cfg = ModelConfig::micro();
    let mut full = ParamStore::new();
    backbone::init_backbone(&mut full, &cfg, &mut rng(38));
    let mut store = ParamStore::new();
    for (name, t) in full.iter().filter(|(n, _)| n.starts_with("backbone.patch_embed") || *n == "backbone.pos_embed") {
        store.insert(name.clone(), t.clone());
    }
    for v in store.get_mut("backbone.pos_embed").unwrap().values_mut() {
        *v = 0.01;
    }
    cases.push(GradCase::with_params("patch_embed", store, vec![random_input(&[3, 16, 16], 39)], move |ctx, v| {
        backbone::patch_embed(ctx, v[0], &cfg)
    }));

    let mut store = ParamStore::new();
    backbone::init_encoder_layer(&mut store, "enc", 4, 6, &mut rng(42));
    cases.push(GradCase::with_params("encoder_layer", store, vec![random_input(&[4, 4], 43)], |ctx, v| {
        backbone::encoder_layer(ctx, "enc", v[0], 2)
    }));

    let mut store = ParamStore::new();
    store.init_linear("reduce", 6, 3, &mut rng(44));
    cases.push(GradCase::with_params("reduce_channels", store, vec![random_input(&[6, 4], 45)], |ctx, v| {
        let fm = FeatureMap { var: v[0], channels: 6, h: 2, w: 2 };
        Ok(backbone::reduce_channels(ctx, "reduce", fm, 3)?.var)
    }));

    let mut store = ParamStore::new();
    tab::init_tab(&mut store, "tab", 4, &mut rng(46));
    cases.push(GradCase::with_params("tab_forward", store, vec![random_input(&[4, 3], 47)], |ctx, v| {
        let fm = FeatureMap { var: v[0], channels: 4, h: 1, w: 3 };
        Ok(tab::tab_forward(ctx, "tab", fm, TabTemperature::SqrtTokens)?.out.var)
    }));

    let block = |channels: usize, heads: usize, scale: f64| SstbParams {
        prefix: "sstb".into(),
        channels,
        heads,
        window: 2,
        mlp_hidden: channels,
        scale,
        relative_bias: false,
    };
    for layer in 0..2 {
        let p = block(4, 1, 0.5);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut rng(48));
        let name = if layer == 0 { "stl_forward" } else { "stl_forward_shifted" };
        cases.push(GradCase::with_params(name, store, vec![random_input(&[4, 4], 49)], move |ctx, v| {
            Ok(sstb::stl_forward(ctx, &p, v[0], 2, 2, layer)?.out)
        }));
    }
    let p = block(4, 2, 0.5);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(50));
    cases.push(GradCase::with_params("sstb_forward", store, vec![random_input(&[16, 4], 51)], move |ctx, v| {
        sstb::sstb_forward(ctx, &p, v[0], 4, 4)
    }));

    let mut store = ParamStore::new();
    head::init_head(&mut store, 4, &mut rng(52));
    cases.push(GradCase::with_params("head", store, vec![random_input(&[4, 4], 53)], |ctx, v| {
        let out = head::branch_forward(ctx, v[0])?;
        head::aggregate_on_graph(&mut ctx.g, out.scores, out.weights)
    }));

    let model = Maniqa::new(ModelConfig::micro()).expect("micro config is valid");
    let store = model.init_params(54);
    let mut image = random_input(&[3, 16, 16], 55);
    image.values_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    cases.push(GradCase::with_params("full_model_micro", store, vec![image.clone()], move |ctx, v| {
        Ok(model.forward(ctx, v[0])?.score)
    }));

    let conv = Maniqa::new(ModelConfig {
        backbone: crate::model::BackboneVariant::Conv,
        ..ModelConfig::micro()
    })
    .expect("micro config is valid");
    let store = conv.init_params(56);
    cases.push(GradCase::with_params("full_model_conv_backbone", store, vec![image], move |ctx, v| {
        Ok(conv.forward(ctx, v[0])?.score)
    }));

    cases
}

pub fn registered_cases() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(block_cases());
    cases
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&GradCheckReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// One aligned line per op.
    pub fn to_text(&self) -> String {
        let width = self.reports.iter().map(|r| r.op.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &self.reports {
            let coords: usize = r.inputs.iter().map(|i| i.coords_checked).sum();
            s.push_str(&format!(
                "{:<width$}  {}  max_rel_err={:.3e}  coords={}\n",
                r.op,
                if r.passed { "PASS" } else { "FAIL" },
                r.max_rel_error,
                coords,
            ));
        }
        s
    }
}

pub fn run_suite(cases: &[GradCase], checker: &GradCheck) -> Result<SuiteReport> {
    let start = Instant::now();
    let reports = cases
        .iter()
        .map(|c| c.run(checker))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        passed: reports.iter().all(|r| r.passed),
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let report = run_suite(&registered_cases(), &GradCheck::default()).unwrap();
        eprintln!("{}", report.to_text());
        eprintln!("{:.1}s", report.seconds);
        assert!(report.passed, "{}", report.to_text());
    }
}
