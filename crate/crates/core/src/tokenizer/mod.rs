//! Visual vocabulary: k-means codebooks over pixel patches or frozen
//! encoder features, and per-patch tokenization.

mod codebook;

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

pub use codebook::{
    build_codebook, fit_codebook, Codebook, CodebookMode, FitStats, Standardizer, INERTIA_TOLERANCE,
    MAX_ITERATIONS,
};

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::seed::SeedStream;
use crate::error::{Error, Result};
use crate::vit::{patchify, Backbone, BackboneConfig};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"VPTMCDBK";
pub const CODEBOOK_VERSION: u16 = 1;

/// Per-patch vectors fed to the codebook: raw patch pixels in pixel mode,
/// final hidden states of the frozen extractor in feature mode.
pub fn patch_vectors(
    image: &[f64],
    cfg: &BackboneConfig,
    mode: CodebookMode,
    extractor: Option<&Backbone>,
) -> Result<Tensor> {
    let patches = patchify(image, cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_size)?;
    match mode {
        CodebookMode::Pixel => Ok(patches),
        CodebookMode::Feature => {
            let ex = extractor
                .ok_or_else(|| Error::invalid("feature codebook needs a frozen extractor"))?;
            if ex.config.patch_dim() != cfg.patch_dim() || ex.config.num_patches() != cfg.num_patches() {
                return Err(Error::shape(
                    "patch_vectors",
                    "extractor geometry differs from the image geometry",
                ));
            }
            encoder_patch_states(ex, &patches)
        }
    }
}

/// Hidden states at the patch positions of `[CLS], x_1..x_N` (no mask).
pub fn encoder_patch_states(backbone: &Backbone, patches: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = backbone.bind(&mut g)?;
    let p = g.constant(patches.clone())?;
    let e = b.embed_patches(&mut g, p)?;
    let cls = b.cls_embedding(&mut g)?;
    let seq = g.concat_rows(&[cls, e])?;
    let h = b.encode(&mut g, seq)?;
    let n = backbone.config.num_patches();
    let rows = g.slice_rows(h, 1, n + 1)?;
    Ok(g.value(rows).clone())
}

/// One token per patch, in patch row-major order.
pub fn tokenize_image(
    image: &[f64],
    cfg: &BackboneConfig,
    codebook: &Codebook,
    extractor: Option<&Backbone>,
) -> Result<Vec<usize>> {
    let vecs = patch_vectors(image, cfg, codebook.mode, extractor)?;
    (0..vecs.rows()).map(|r| codebook.tokenize(vecs.row(r))).collect()
}

/// Patch vectors of the whole dataset, subsampled to at most `max_vectors`
/// with the `codebook-sample` substream.
pub fn dataset_patch_vectors(
    dataset: &Dataset,
    cfg: &BackboneConfig,
    mode: CodebookMode,
    extractor: Option<&Backbone>,
    max_vectors: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::new();
    for i in 0..dataset.len() {
        let v = patch_vectors(&dataset.image(i), cfg, mode, extractor)?;
        all.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
    }
    if all.len() > max_vectors {
        all.shuffle(&mut SeedStream::new(seed).rng("codebook-sample"));
        all.truncate(max_vectors);
    }
    Ok(all)
}

/// Samples patch vectors from `dataset` and fits a `k`-entry codebook.
pub fn codebook_from_dataset(
    dataset: &Dataset,
    cfg: &BackboneConfig,
    mode: CodebookMode,
    k: usize,
    extractor: Option<&Backbone>,
    max_vectors: usize,
    seed: u64,
) -> Result<Codebook> {
    let samples = dataset_patch_vectors(dataset, cfg, mode, extractor, max_vectors, seed)?;
    fit_codebook(&samples, k, mode, &mut SeedStream::new(seed).rng("codebook"))
}

impl Codebook {
    /// Rounds codes and standardizer to `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for c in &mut self.codes {
            for v in c.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.standardizer.mean = self.standardizer.mean as f32 as f64;
        self.standardizer.std = self.standardizer.std as f32 as f64;
    }

    /// `VPTMCDBK` layout: magic, version u16, mode u8, K u32, d_c u32,
    /// standardizer mean and std as f32, then K x d_c f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.write_u16::<LittleEndian>(CODEBOOK_VERSION).unwrap();
        out.push(self.mode.byte());
        out.write_u32::<LittleEndian>(self.codes.len() as u32).unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        out.write_f32::<LittleEndian>(self.standardizer.mean as f32).unwrap();
        out.write_f32::<LittleEndian>(self.standardizer.std as f32).unwrap();
        for c in &self.codes {
            for &v in c {
                out.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let fail = |cur: &Cursor<&[u8]>, d: &str| Error::Format {
            offset: cur.position(),
            detail: d.to_string(),
        };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| fail(&cur, "truncated magic"))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CODEBOOK_MAGIC).into(),
                found: String::from_utf8_lossy(&magic).into(),
            });
        }
        let version = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| fail(&cur, "truncated version"))?;
        if version != CODEBOOK_VERSION {
            return Err(fail(&cur, &format!("unsupported version {version}")));
        }
        let mode_byte = cur.read_u8().map_err(|_| fail(&cur, "truncated mode"))?;
        let mode = CodebookMode::from_byte(mode_byte)
            .ok_or_else(|| fail(&cur, &format!("unknown mode byte {mode_byte}")))?;
        let k = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated K"))? as usize;
        let dim = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated d_c"))? as usize;
        let mean = cur.read_f32::<LittleEndian>().map_err(|_| fail(&cur, "truncated mean"))? as f64;
        let std = cur.read_f32::<LittleEndian>().map_err(|_| fail(&cur, "truncated std"))? as f64;
        let need = (k * dim * 4) as u64;
        if bytes.len() as u64 - cur.position() != need {
            return Err(fail(
                &cur,
                &format!("expected {need} payload bytes for {k} x {dim} codes"),
            ));
        }
        let mut codes = Vec::with_capacity(k);
        for _ in 0..k {
            let mut c = Vec::with_capacity(dim);
            for _ in 0..dim {
                c.push(cur.read_f32::<LittleEndian>().unwrap() as f64);
            }
            codes.push(c);
        }
        if k < 2 {
            return Err(fail(&cur, "codebook needs at least two codes"));
        }
        Ok(Codebook {
            mode,
            dim,
            codes,
            standardizer: Standardizer { mean, std },
            stats: FitStats::default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
