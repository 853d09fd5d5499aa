//! Finite-difference validation of every trainable tensor.
//!
//! Two scenarios mirror the two training phases: the pretraining objective
//! (backbone and head trainable) and the base-session objective (frozen
//! backbone; prompts and head trainable, with perturbation and token mixing
//! active). Analytic gradients come from the f32 backward pass; the oracle
//! is a central difference of the identical loss construction evaluated in
//! f64. Stochastic draws are frozen by reseeding the streams for every
//! evaluation, so both precisions and both sides of each difference see the
//! same masks and the same mixing draw.

use crate::error::{Error, Result};
use crate::mixup::{one_hot, MixupConfig};
use crate::prompts::PromptSet;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::train::{build_batch_loss, BatchSpec, ComponentToggles, Head, StepRngs};
use crate::vit::{BackboneParams, VitConfig};

const SCENARIO_SEED: u64 = 0xCA5D;
const PCAP_EVAL_SEED: u64 = 0x9C;
const MIX_EVAL_SEED: u64 = 0x3D;
const BATCH: usize = 3;
const CLASSES: usize = 3;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Max relative error allowed per component.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Cap on checked elements per tensor; 0 checks every element.
    pub max_elements_per_tensor: usize,
    /// Test fixture: negate the analytic gradient of the named tensor.
    pub sabotage: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            step: 1e-3,
            max_elements_per_tensor: 0,
            sabotage: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&ComponentReport> {
        self.components.iter().filter(|c| !c.pass).collect()
    }
}

struct Scenario<T: Scalar> {
    images: Vec<Tensor<T>>,
    targets: Tensor<T>,
    backbone: BackboneParams<T>,
    prompts: Option<PromptSet<T>>,
    head: Head<T>,
    toggles: ComponentToggles,
    mixup: MixupConfig,
}

impl<T: Scalar> Scenario<T> {
    fn eval_loss(&self) -> Result<f64> {
        let mut tape: Tape<T> = Tape::new();
        let mut pcap = Rng::new(PCAP_EVAL_SEED);
        let mut mix = Rng::new(MIX_EVAL_SEED);
        let built = build_batch_loss(
            &mut tape,
            &BatchSpec {
                images: &self.images,
                one_hot: &self.targets,
                backbone: &self.backbone,
                prompts: self.prompts.as_ref(),
                head: &self.head,
                toggles: self.toggles,
                mixup: self.mixup,
                forced_mix: None,
            },
            &mut StepRngs {
                pcap: &mut pcap,
                mix: &mut mix,
            },
        )?;
        Ok(tape.scalar_value(built.loss).to_f64())
    }

    /// Trainable tensors in the fixed order used for gradient extraction.
    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.prompts.is_none() {
            names.extend(self.backbone.named_tensors().into_iter().map(|(n, _)| n));
        }
        if let Some(p) = &self.prompts {
            if self.toggles.cagp {
                for l in 0..p.layer_count() {
                    names.push(format!("cagp.q.{l}"));
                }
                for l in 0..p.layer_count() {
                    names.push(format!("cagp.k.{l}"));
                }
                for l in 0..p.layer_count() {
                    names.push(format!("cagp.v.{l}"));
                }
            }
            if self.toggles.cdap {
                names.push("cdap.d".into());
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<T> {
        if name == "head.w" {
            return &mut self.head.w;
        }
        if name == "head.b" {
            return &mut self.head.b;
        }
        if name.starts_with("backbone.") {
            for (n, t) in self.backbone.named_tensors_mut() {
                if n == name {
                    return t;
                }
            }
        }
        if let Some(p) = &mut self.prompts {
            for (n, t) in p.named_tensors_mut() {
                if n == name {
                    return t;
                }
            }
        }
        panic!("unknown trainable tensor {name}");
    }
}

fn scenario_f32(base_session: bool) -> Result<Scenario<f32>> {
    let cfg = VitConfig::tiny();
    let mut rng = Rng::new(SCENARIO_SEED);
    let mut backbone = BackboneParams::init(cfg, &mut rng)?;
    let mut head = Head::init(cfg.dim, CLASSES, &mut rng);
    head.w = Tensor::trunc_normal(&[cfg.dim, CLASSES], 0.3, &mut rng).with_grad();
    let images: Vec<Tensor<f32>> = (0..BATCH)
        .map(|_| {
            let n = cfg.channels * cfg.image_size * cfg.image_size;
            Tensor::from_vec(
                vec![cfg.channels, cfg.image_size, cfg.image_size],
                (0..n).map(|_| rng.next_f32()).collect(),
            )
            .unwrap()
        })
        .collect();
    let labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
    let targets = one_hot::<f32>(&labels, CLASSES)?;

    if !base_session {
        return Ok(Scenario {
            images,
            targets,
            backbone,
            prompts: None,
            head,
            toggles: ComponentToggles::all_off(),
            mixup: MixupConfig::default(),
        });
    }

    backbone.set_frozen(true);
    let mut prompts = PromptSet::zeros(&cfg);
    for (_, t) in prompts.named_tensors_mut() {
        *t = Tensor::trunc_normal(t.shape(), 0.2, &mut rng).with_grad();
    }
    prompts.dropout_rate = 0.1;
    prompts.set_training(true);
    Ok(Scenario {
        images,
        targets,
        backbone,
        prompts: Some(prompts),
        head,
        toggles: ComponentToggles::default(),
        mixup: MixupConfig {
            enabled: true,
            split_layer: 1,
            beta_alpha: 1.0,
            lambda_mix: 0.5,
        },
    })
}

fn analytic_grads(scn: &Scenario<f32>) -> Result<Vec<(String, Vec<f32>)>> {
    let mut tape: Tape<f32> = Tape::new();
    let mut pcap = Rng::new(PCAP_EVAL_SEED);
    let mut mix = Rng::new(MIX_EVAL_SEED);
    let built = build_batch_loss(
        &mut tape,
        &BatchSpec {
            images: &scn.images,
            one_hot: &scn.targets,
            backbone: &scn.backbone,
            prompts: scn.prompts.as_ref(),
            head: &scn.head,
            toggles: scn.toggles,
            mixup: scn.mixup,
            forced_mix: None,
        },
        &mut StepRngs {
            pcap: &mut pcap,
            mix: &mut mix,
        },
    )?;
    tape.backward(built.loss)?;

    let mut out = Vec::new();
    let grab = |tape: &Tape<f32>, v: crate::tape::Var| -> Result<Vec<f32>> {
        tape.grad(v)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::InvalidArgument("missing analytic gradient".into()))
    };
    if scn.prompts.is_none() {
        let names: Vec<String> = scn.backbone.named_tensors().into_iter().map(|(n, _)| n).collect();
        let vars = crate::train::backbone_vars_ordered(&built.backbone);
        for (n, v) in names.into_iter().zip(vars) {
            out.push((n, grab(&tape, v)?));
        }
    }
    if let Some(pv) = &built.prompts {
        if scn.toggles.cagp {
            for (l, &v) in pv.q.iter().enumerate() {
                out.push((format!("cagp.q.{l}"), grab(&tape, v)?));
            }
            for (l, &v) in pv.k.iter().enumerate() {
                out.push((format!("cagp.k.{l}"), grab(&tape, v)?));
            }
            for (l, &v) in pv.v.iter().enumerate() {
                out.push((format!("cagp.v.{l}"), grab(&tape, v)?));
            }
        }
        if scn.toggles.cdap {
            out.push(("cdap.d".into(), grab(&tape, pv.d)?));
        }
    }
    out.push(("head.w".into(), grab(&tape, built.head_w)?));
    out.push(("head.b".into(), grab(&tape, built.head_b)?));
    Ok(out)
}

fn elements_to_check(numel: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || numel <= cap {
        return (0..numel).collect();
    }
    // deterministic spread including both ends
    (0..cap)
        .map(|i| i * (numel - 1) / (cap - 1).max(1))
        .collect()
}

fn check_scenario(
    label: &str,
    base_session: bool,
    cfg: &GradCheckConfig,
) -> Result<Vec<ComponentReport>> {
    let scn32 = scenario_f32(base_session)?;
    let grads = analytic_grads(&scn32)?;
    let mut shadow: Scenario<f64> = Scenario {
        images: scn32.images.iter().map(Tensor::cast).collect(),
        targets: scn32.targets.cast(),
        backbone: scn32.backbone.cast(),
        prompts: scn32.prompts.as_ref().map(PromptSet::cast),
        head: scn32.head.cast(),
        toggles: scn32.toggles,
        mixup: scn32.mixup,
    };

    let names = scn32.trainable_names();
    debug_assert_eq!(names.len(), grads.len());
    let mut reports = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(&grads) {
        debug_assert_eq!(name, &grad.0);
        let mut analytic = grad.1.clone();
        if cfg.sabotage.as_deref() == Some(name.as_str()) {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let scale = analytic
            .iter()
            .fold(0.0f64, |m, &g| m.max((g as f64).abs()));
        let mut max_rel: f64 = 0.0;
        let idxs = elements_to_check(analytic.len(), cfg.max_elements_per_tensor);
        let mut checked = 0usize;
        for &e in &idxs {
            let original = shadow.tensor_mut(name).data()[e];
            shadow.tensor_mut(name).data_mut()[e] = original + cfg.step;
            let up = shadow.eval_loss()?;
            shadow.tensor_mut(name).data_mut()[e] = original - cfg.step;
            let down = shadow.eval_loss()?;
            shadow.tensor_mut(name).data_mut()[e] = original;
            let fd = (up - down) / (2.0 * cfg.step);
            let an = analytic[e] as f64;
            let denom = fd.abs().max(an.abs()).max(1e-3 * scale).max(1e-9);
            max_rel = max_rel.max((fd - an).abs() / denom);
            checked += 1;
        }
        reports.push(ComponentReport {
            name: format!("{label}/{name}"),
            max_rel_err: max_rel,
            checked,
            pass: max_rel < cfg.tolerance,
        });
    }
    Ok(reports)
}

/// Check analytic gradients of both training objectives against 64-bit
/// central differences, tensor by tensor.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut components = check_scenario("pretrain", false, cfg)?;
    components.extend(check_scenario("base", true, cfg)?);
    let pass = components.iter().all(|c| c.pass);
    Ok(GradCheckReport { components, pass })
}
