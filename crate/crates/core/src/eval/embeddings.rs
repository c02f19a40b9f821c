//! CLS embedding export for visualization: one row per frame, manifest
//! order, from either the last block's output or the pre-head (post final
//! normalization) state.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::model::IqaModel;
use crate::params::ParamStore;
use crate::tensor::Graph;
use crate::train::{LoadedFrame, TrainError};

use super::pca::{pca_project, PcaResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    /// CLS state out of the last transformer block, before the final norm.
    PenultimateBlock,
    /// CLS state after the final layer normalization (what the head sees).
    PreHead,
}

impl EmbeddingLayer {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "penultimate_block" => Ok(EmbeddingLayer::PenultimateBlock),
            "pre_head" => Ok(EmbeddingLayer::PreHead),
            other => Err(DataError::Format(format!("unknown embedding layer {other:?}"))),
        }
    }
}

pub struct EmbeddingRow {
    pub embedding: Vec<f32>,
    pub label: u8,
}

/// Embeddings for every frame, in input order.
pub fn export_embeddings(
    model: &IqaModel,
    store: &ParamStore<f32>,
    frames: &[LoadedFrame],
    layer: EmbeddingLayer,
    batch_size: usize,
) -> Result<Vec<EmbeddingRow>, TrainError> {
    let s = model.cfg.encoder.image_size;
    let d = model.cfg.encoder.embed_dim;
    let mut rows = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let mut g: Graph<f32> = Graph::new();
        let mut buf = Vec::with_capacity(chunk.len() * s * s);
        for f in chunk {
            buf.extend_from_slice(&f.image);
        }
        let images = g.constant(buf, vec![chunk.len(), 1, s, s])?;
        let enc = model.encode(&mut g, store, images)?;
        let emb = match layer {
            EmbeddingLayer::PenultimateBlock => enc.cls_penultimate,
            EmbeddingLayer::PreHead => enc.cls_embedding,
        };
        let data = g.data(emb);
        for (i, f) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                embedding: data[i * d..(i + 1) * d].to_vec(),
                label: f.record.label,
            });
        }
    }
    Ok(rows)
}

/// `embedding_0,...,embedding_{d-1},label` with a header row.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    let d = rows.first().map_or(0, |r| r.embedding.len());
    let header: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.embedding.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{}", vals.join(","), r.label)?;
    }
    Ok(())
}

/// 2-D PCA of exported embeddings.
pub fn pca_of_embeddings(rows: &[EmbeddingRow], k: usize) -> Result<PcaResult, super::pca::PcaError> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.embedding.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.embedding.iter().map(|&v| f64::from(v))).collect();
    pca_project(&flat, n, d, k)
}

/// `pc1,pc2,label` per frame, plus a sibling variance table.
pub fn write_pca_csv(
    path: &Path,
    variance_path: &Path,
    rows: &[EmbeddingRow],
    pca: &PcaResult,
) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let k = pca.components.len();
    let mut f = fs::File::create(path)?;
    let header: Vec<String> = (1..=k).map(|i| format!("pc{i}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    for (coords, row) in pca.coords.iter().zip(rows.iter()) {
        let vals: Vec<String> = coords.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{}", vals.join(","), row.label)?;
    }
    let mut vf = fs::File::create(variance_path)?;
    writeln!(vf, "component,explained_variance")?;
    for (i, e) in pca.explained.iter().enumerate() {
        writeln!(vf, "pc{},{e}", i + 1)?;
    }
    Ok(())
}
