//! Python bindings: datasets, codebooks, backbones, tuned models and the
//! accounting helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use vptm_core::checkpoint::Checkpoint;
use vptm_core::data::{load_dataset, make_synthetic, Dataset, SyntheticSpec};
use vptm_core::mvtm::{pretrain, sample_block_mask, write_trace_csv, PretrainOptions};
use vptm_core::prompt::{Layout, SequenceLayout};
use vptm_core::regimes::{embedding_rows, evaluate, run_regime, Regime, RegimeSpec, TrainOptions, TunedModel};
use vptm_core::seed::SeedStream;
use vptm_core::tokenizer::{codebook_from_dataset, tokenize_image, Codebook, CodebookMode};
use vptm_core::verbalizer::RowKind;
use vptm_core::vit::{count_params, estimate_flops, Backbone, BackboneConfig, TunedSpec};

fn err(e: vptm_core::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn layout(s: &str) -> PyResult<Layout> {
    Layout::ALL
        .into_iter()
        .find(|l| l.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| PyValueError::new_err(format!("unknown layout `{s}`")))
}

fn preset(name: &str) -> PyResult<BackboneConfig> {
    match name {
        "desk" => Ok(BackboneConfig::desk()),
        "vit-base" | "vit_base" => Ok(BackboneConfig::vit_base()),
        _ => Err(PyValueError::new_err(format!("unknown preset `{name}` (desk, vit-base)"))),
    }
}

/// Labeled u8 images in the VPTMDATA container.
#[pyclass(name = "Dataset")]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (classes, per_class, seed, image_size=32, noise_std=None))]
    fn synthetic(classes: usize, per_class: usize, seed: u64, image_size: usize, noise_std: Option<f64>) -> PyResult<Self> {
        let mut spec = SyntheticSpec::textures(classes, per_class, seed);
        spec.image_size = image_size;
        if let Some(n) = noise_std {
            spec.noise_std = n;
        }
        make_synthetic(&spec).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.0.n_classes
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height, self.0.width, self.0.channels)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    /// Raw pixels of image `i`, row-major HWC.
    fn image(&self, i: usize) -> PyResult<Vec<u8>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err(format!("index {i} outside {} images", self.0.len())));
        }
        Ok(self.0.image_u8(i).to_vec())
    }

    fn class_histogram(&self) -> Vec<usize> {
        self.0.class_histogram()
    }
}

/// Visual vocabulary fitted by k-means.
#[pyclass(name = "Codebook")]
struct PyCodebook(Codebook);

#[pymethods]
impl PyCodebook {
    /// Fits `k` codes on patch vectors of `data`; feature mode reads the
    /// hidden states of `extractor`.
    #[staticmethod]
    #[pyo3(signature = (data, k, mode="pixel", extractor=None, max_vectors=20000, seed=0, patch_size=4))]
    fn fit(
        data: &PyDataset,
        k: usize,
        mode: &str,
        extractor: Option<&PyBackbone>,
        max_vectors: usize,
        seed: u64,
        patch_size: usize,
    ) -> PyResult<Self> {
        let mode: CodebookMode = match mode {
            "pixel" => CodebookMode::Pixel,
            "feature" => CodebookMode::Feature,
            _ => return Err(PyValueError::new_err(format!("unknown codebook mode `{mode}`"))),
        };
        let cfg = match extractor {
            Some(b) => b.0.config,
            None => BackboneConfig {
                image_size: data.0.height,
                channels: data.0.channels,
                patch_size,
                vocab_size: k,
                ..BackboneConfig::desk()
            },
        };
        codebook_from_dataset(&data.0, &cfg, mode, k, extractor.map(|b| &b.0), max_vectors, seed)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Codebook::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.0.mode.as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    /// Nearest code for one vector.
    fn tokenize(&self, vector: Vec<f64>) -> PyResult<usize> {
        self.0.tokenize(&vector).map_err(err)
    }
}

/// Pretrained ViT encoder with its vocabulary head.
#[pyclass(name = "Backbone")]
struct PyBackbone(Backbone);

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    #[pyo3(signature = (preset_name="desk", seed=0))]
    fn init(preset_name: &str, seed: u64) -> PyResult<Self> {
        Backbone::init(preset(preset_name)?, &mut SeedStream::new(seed).rng("init"))
            .map(Self)
            .map_err(err)
    }

    /// Masked visual token pretraining from scratch; returns the backbone
    /// and writes the loss trace when `trace` is given.
    #[staticmethod]
    #[pyo3(signature = (data, codebook, epochs=100, batch_size=64, seed=0, extractor=None, trace=None))]
    fn pretrain(
        data: &PyDataset,
        codebook: &PyCodebook,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        extractor: Option<&PyBackbone>,
        trace: Option<PathBuf>,
    ) -> PyResult<Self> {
        let cfg = BackboneConfig {
            image_size: data.0.height,
            channels: data.0.channels,
            vocab_size: codebook.0.len(),
            ..BackboneConfig::desk()
        };
        let opts = PretrainOptions {
            epochs,
            batch_size,
            seed,
            ..PretrainOptions::default()
        };
        let out = pretrain(cfg, &data.0, &codebook.0, extractor.map(|b| &b.0), &opts).map_err(err)?;
        if let Some(p) = trace {
            write_trace_csv(&p, &out.trace).map_err(err)?;
        }
        Ok(Self(out.backbone))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Backbone::from_checkpoint(&ck).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_checkpoint().save(&path).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.0.params.total_count()
    }

    fn checkpoint_bytes(&self) -> Vec<u8> {
        self.0.checkpoint_bytes()
    }

    /// Visual tokens of image `i` of `data`, one per patch.
    #[pyo3(signature = (data, i, codebook, extractor=None))]
    fn tokenize(&self, data: &PyDataset, i: usize, codebook: &PyCodebook, extractor: Option<&PyBackbone>) -> PyResult<Vec<usize>> {
        if i >= data.0.len() {
            return Err(PyValueError::new_err(format!("index {i} outside {} images", data.0.len())));
        }
        tokenize_image(&data.0.image(i), &self.0.config, &codebook.0, extractor.map(|b| &b.0)).map_err(err)
    }
}

/// Backbone plus a regime's prompts and head.
#[pyclass(name = "TunedModel")]
struct PyTunedModel(TunedModel);

#[pymethods]
impl PyTunedModel {
    /// Attaches a head, trains on `train` and returns the model with its
    /// test accuracy.
    #[staticmethod]
    #[pyo3(signature = (backbone, train, test, regime="vptm", layout_name="CXPM", n_prompts=5, proto_dim=64, epochs=50, batch_size=64, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        backbone: &PyBackbone,
        train: &PyDataset,
        test: &PyDataset,
        regime: &str,
        layout_name: &str,
        n_prompts: usize,
        proto_dim: usize,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(Self, f64)> {
        let regime: Regime = regime.parse().map_err(err)?;
        let spec = RegimeSpec {
            regime,
            layout: layout(layout_name)?,
            n_prompts,
            proto_dim: if regime == Regime::Vptm { proto_dim } else { 0 },
            n_classes: train.0.n_classes,
        };
        let opts = TrainOptions {
            epochs,
            batch_size,
            seed,
            ..TrainOptions::default()
        };
        let (model, metrics, _) = run_regime(&backbone.0, spec, &train.0, &test.0, &opts).map_err(err)?;
        Ok((Self(model), metrics.accuracy))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        TunedModel::from_checkpoint(&ck).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_checkpoint().save(&path).map_err(err)
    }

    #[getter]
    fn regime(&self) -> &'static str {
        self.0.spec.regime.as_str()
    }

    #[getter]
    fn layout(&self) -> &'static str {
        self.0.spec.layout.as_str()
    }

    fn trainable_count(&self) -> usize {
        self.0.trainable_count()
    }

    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        evaluate(&self.0, &data.0).map_err(err)
    }

    fn predict(&self, data: &PyDataset, i: usize) -> PyResult<usize> {
        if i >= data.0.len() {
            return Err(PyValueError::new_err(format!("index {i} outside {} images", data.0.len())));
        }
        self.0.predict(&data.0.image(i)).map_err(err)
    }

    /// `(kind, class, vector)` rows: prototypes first, then one per image.
    fn embeddings(&self, data: &PyDataset) -> PyResult<Vec<(String, usize, Vec<f64>)>> {
        Ok(embedding_rows(&self.0, &data.0)
            .map_err(err)?
            .into_iter()
            .map(|r| {
                let kind = match r.kind {
                    RowKind::Proto => "proto",
                    RowKind::Sample => "sample",
                };
                (kind.to_string(), r.class, r.values)
            })
            .collect())
    }
}

/// `(tuned, total, ratio_percent)` for a regime on a preset geometry.
#[pyfunction]
#[pyo3(signature = (n_prompts, proto_dim, n_classes, regime="vptm", preset_name="vit-base"))]
fn count_parameters(n_prompts: usize, proto_dim: usize, n_classes: usize, regime: &str, preset_name: &str) -> PyResult<(usize, usize, f64)> {
    let regime: Regime = regime.parse().map_err(err)?;
    let spec = TunedSpec {
        regime,
        n_prompts,
        proto_dim: if regime == Regime::Vptm { proto_dim } else { 0 },
        n_classes,
    };
    let c = count_params(&preset(preset_name)?, &spec);
    Ok((c.tuned, c.total, c.ratio_percent))
}

/// Forward GFLOPs per image for a sequence of `seq_len` tokens.
#[pyfunction]
#[pyo3(signature = (seq_len, preset_name="vit-base"))]
fn gflops(seq_len: usize, preset_name: &str) -> PyResult<f64> {
    Ok(estimate_flops(&preset(preset_name)?, seq_len))
}

/// `(length, mask index)` of the input sequence for a layout.
#[pyfunction]
fn sequence_layout(layout_name: &str, n_patches: usize, n_prompts: usize) -> PyResult<(usize, usize)> {
    let s = SequenceLayout::new(layout(layout_name)?, n_patches, n_prompts);
    Ok((s.len(), s.mask_index()))
}

/// Masked patch indices of one block-wise plan.
#[pyfunction]
#[pyo3(signature = (grid_h, grid_w, ratio=0.4, seed=0))]
fn block_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
    sample_block_mask(grid_h, grid_w, ratio, &mut SeedStream::new(seed).rng("mask"))
        .map(|p| p.indices())
        .map_err(err)
}

#[pymodule]
fn vptm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyTunedModel>()?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(gflops, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_layout, m)?)?;
    m.add_function(wrap_pyfunction!(block_mask, m)?)?;
    Ok(())
}
