//! Output artifacts: metrics CSV, summary JSON, and checkpoint assembly.
//! Every artifact embeds the resolved config and seed; formatting is fixed
//! so a rerun with the same seeds is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use casp_core::checkpoint::Checkpoint;
use casp_core::error::{Error, Result};
use casp_core::prompts::PromptSet;
use casp_core::proto::PrototypeMatrix;
use casp_core::tensor::Tensor;
use casp_core::train::{SessionRow, Summary};
use casp_core::vit::{BackboneParams, VitConfig};

use crate::config::RunConfig;

pub fn format_acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Metrics CSV: commented config echo, then one row per session.
pub fn metrics_csv(config_echo: &str, seed: u64, rows: &[SessionRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str(&format!("# seed: {seed}\n"));
    out.push_str("session,overall_acc,base_acc,novel_acc,n_classes\n");
    for r in rows {
        let novel = r.novel_acc.map(format_acc).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.session,
            format_acc(r.overall_acc),
            format_acc(r.base_acc),
            novel,
            r.n_classes
        ));
    }
    out
}

/// Re-derive the average session accuracy from a metrics CSV.
pub fn csv_mean_overall(text: &str) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("session,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "csv row has {} fields: {line}",
                fields.len()
            )));
        }
        sum += fields[1]
            .parse::<f64>()
            .map_err(|e| Error::InvalidArgument(format!("bad overall_acc in `{line}`: {e}")))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("csv has no data rows".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowJson {
    pub session: u32,
    pub overall_acc: f64,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub n_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryJson {
    pub a_b: f64,
    pub a_n: Option<f64>,
    pub a_l: f64,
    pub a_avg: f64,
    pub a_n_last_session_only: Option<f64>,
    pub seed: u64,
    pub tag: String,
    pub sessions: Vec<f64>,
    pub rows: Vec<RowJson>,
    pub csv: String,
    pub pretrain_holdout_accuracy: Option<f64>,
    pub config: RunConfig,
}

pub fn summary_json(
    config: &RunConfig,
    tag: &str,
    seed: u64,
    rows: &[SessionRow],
    summary: &Summary,
    csv_name: &str,
    pretrain_holdout: Option<f64>,
) -> SummaryJson {
    SummaryJson {
        a_b: summary.a_b,
        a_n: summary.a_n,
        a_l: summary.a_l,
        a_avg: summary.a_avg,
        a_n_last_session_only: summary.a_n_last_session_only,
        seed,
        tag: tag.to_string(),
        sessions: rows.iter().map(|r| r.overall_acc).collect(),
        rows: rows
            .iter()
            .map(|r| RowJson {
                session: r.session,
                overall_acc: r.overall_acc,
                base_acc: r.base_acc,
                novel_acc: r.novel_acc,
                n_classes: r.n_classes,
            })
            .collect(),
        csv: csv_name.to_string(),
        pretrain_holdout_accuracy: pretrain_holdout,
        config: config.clone(),
    }
}

// ── checkpoint assembly ─────────────────────────────────────────────────

pub const CONFIG_TENSOR: &str = "meta.config_json";

pub fn checkpoint_from_state(
    backbone: &BackboneParams<f32>,
    prompts: Option<&PromptSet<f32>>,
    prototypes: &PrototypeMatrix,
    config_echo: &str,
    rng_seed: u64,
    rng_state: u64,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(rng_seed, rng_state);
    ckpt.push_text(CONFIG_TENSOR, config_echo);
    for (name, t) in backbone.named_tensors() {
        ckpt.push(name, t.clone());
    }
    if let Some(p) = prompts {
        for (name, t) in p.named_tensors() {
            ckpt.push(name, t.clone());
        }
    }
    if !prototypes.is_empty() {
        let dim = prototypes.dim();
        let mut rows = Vec::with_capacity(prototypes.len() * dim);
        for i in 0..prototypes.len() {
            rows.extend_from_slice(prototypes.row(i));
        }
        ckpt.push(
            "prototypes",
            Tensor::from_vec(vec![prototypes.len(), dim], rows).expect("prototype rows"),
        );
        ckpt.push(
            "proto.class_ids",
            Tensor::from_vec(
                vec![prototypes.len()],
                prototypes.class_ids().iter().map(|&c| c as f32).collect(),
            )
            .expect("class ids"),
        );
        ckpt.push(
            "proto.sessions",
            Tensor::from_vec(
                vec![prototypes.len()],
                prototypes.session_of().iter().map(|&s| s as f32).collect(),
            )
            .expect("session ids"),
        );
    }
    ckpt
}

pub struct RestoredState {
    pub config: RunConfig,
    pub backbone: BackboneParams<f32>,
    pub prompts: Option<PromptSet<f32>>,
    pub prototypes: PrototypeMatrix,
}

fn take_tensor(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "checkpoint restore",
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(t.clone())
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<RestoredState> {
    let config_text = ckpt
        .get_text(CONFIG_TENSOR)
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no embedded config".into()))?;
    let config: RunConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::InvalidArgument(format!("embedded config invalid: {e}")))?;
    let vit: VitConfig = config.model.vit();

    let mut rng = casp_core::rng::Rng::new(0);
    let mut backbone = BackboneParams::init(vit, &mut rng)?;
    {
        let names: Vec<String> = backbone
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for name in names {
            let shape = backbone
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == &name)
                .map(|(_, t)| t.shape().to_vec())
                .unwrap();
            let loaded = take_tensor(ckpt, &name, &shape)?;
            for (n, t) in backbone.named_tensors_mut() {
                if n == name {
                    *t = loaded.clone();
                }
            }
        }
    }
    backbone.set_frozen(true);

    let prompts = if ckpt.get("cagp.q.0").is_some() || ckpt.get("cdap.d").is_some() {
        let mut set = PromptSet::zeros(&vit);
        set.dropout_rate = config.prompts.dropout_rate;
        for (name, t) in set.named_tensors_mut() {
            let loaded = take_tensor(ckpt, &name, t.shape())?;
            *t = loaded;
        }
        set.set_training(false);
        Some(set)
    } else {
        None
    };

    let mut prototypes = PrototypeMatrix::new(vit.dim);
    if let Some(rows) = ckpt.get("prototypes") {
        let k = rows.shape()[0];
        let ids = take_tensor(ckpt, "proto.class_ids", &[k])?;
        let sessions = take_tensor(ckpt, "proto.sessions", &[k])?;
        // group consecutive rows by session id, preserving order
        let mut i = 0usize;
        while i < k {
            let session = sessions.data()[i] as u32;
            let mut batch = Vec::new();
            while i < k && sessions.data()[i] as u32 == session {
                batch.push((ids.data()[i] as u32, rows.row(i).to_vec()));
                i += 1;
            }
            prototypes.append_session(batch, session)?;
        }
    }

    Ok(RestoredState {
        config,
        backbone,
        prompts,
        prototypes,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use casp_core::rng::Rng;

    #[test]
    fn csv_mean_matches_rows() {
        let rows = vec![
            SessionRow {
                session: 0,
                overall_acc: 0.9,
                base_acc: 0.9,
                novel_acc: None,
                n_classes: 4,
            },
            SessionRow {
                session: 1,
                overall_acc: 0.7,
                base_acc: 0.8,
                novel_acc: Some(0.5),
                n_classes: 6,
            },
        ];
        let csv = metrics_csv("{}", 3, &rows);
        assert!(csv.contains("session,overall_acc,base_acc,novel_acc,n_classes"));
        assert!(csv.contains("0,0.900000,0.900000,,4"));
        let mean = csv_mean_overall(&csv).unwrap();
        assert!((mean - 0.8).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_state_roundtrip() {
        let cfg = RunConfig::default();
        let vit = cfg.model.vit();
        let mut rng = Rng::new(9);
        let mut backbone = BackboneParams::init(vit, &mut rng).unwrap();
        backbone.set_frozen(true);
        let mut prompts = PromptSet::zeros(&vit);
        for (_, t) in prompts.named_tensors_mut() {
            *t = Tensor::trunc_normal(t.shape(), 0.1, &mut rng).with_grad();
        }
        prompts.set_training(false);
        let mut protos = PrototypeMatrix::new(vit.dim);
        protos
            .append_session(vec![(4, vec![0.5; vit.dim]), (9, vec![-0.5; vit.dim])], 0)
            .unwrap();
        protos.append_session(vec![(11, vec![1.0; vit.dim])], 1).unwrap();

        let ckpt =
            checkpoint_from_state(&backbone, Some(&prompts), &protos, &cfg.echo(), 5, 77);
        let bytes = casp_core::checkpoint::encode(&ckpt);
        let restored = state_from_checkpoint(&casp_core::checkpoint::decode(&bytes).unwrap())
            .unwrap();
        assert_eq!(restored.config, cfg);
        assert_eq!(
            casp_core::train::state_fingerprint(&restored.backbone, restored.prompts.as_ref()),
            casp_core::train::state_fingerprint(&backbone, Some(&prompts)),
        );
        assert_eq!(restored.prototypes.class_ids(), &[4, 9, 11]);
        assert_eq!(restored.prototypes.session_of(), &[0, 0, 1]);
        assert_eq!(restored.prototypes.row(2), &vec![1.0; vit.dim][..]);
    }
}
