//! The assembled grounding network: image pyramid, expression encoding,
//! fusion and detection head, plus the pre/post-processing around it.

use ndarray::{Axis, ArrayD};
use rand::Rng;
use thiserror::Error;

use crate::config::{data_path, RunConfig};
use crate::datahub::{encode_expression, tokenize, DataError, EmbeddingTable, TokenSequence, Vocabulary};
use crate::dethead::{
    fallback_anchors, kmeans_anchors, load_anchor_file, select_prediction, split_by_area, AnchorSet, DetHead, GridGeom, HeadError, Paradigm,
    PredictionGrid, Selection,
};
use crate::fusion::{Fusion, FusionError};
use crate::geometry::BoundingBox;
use crate::graph::{Graph, ParamStore, Var};
use crate::image_ops::{to_nchw, Image, Letterbox};
use crate::nn::Fwd;
use crate::textenc::{TextEncoder, TextError};
use crate::visenc::{Backbone, VisError, WeightReport};
use crate::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Vis(#[from] VisError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub fusion: Fusion,
    pub head: DetHead,
    pub vocab: Vocabulary,
    /// Priors per head map at `resolution`; empty groups for anchor-free heads.
    pub anchors: AnchorSet,
    pub resolution: usize,
    pub scales_used: usize,
    pub max_len: usize,
    pub literal: bool,
}

/// Output of one prediction, in the pixels of the original image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub bbox: BoundingBox<f64>,
    pub confidence: f64,
    /// The raw selection in network-input pixels.
    pub selection: Selection<f64>,
}

/// Strides of the maps the head sees, finest first.
pub fn head_strides(level_strides: &[usize], head_per_scale: bool) -> Vec<usize> {
    if head_per_scale {
        level_strides.to_vec()
    } else {
        level_strides.last().copied().into_iter().collect()
    }
}

/// Priors for an anchor-based head: the anchor file, else k-means over the
/// training box shapes, else the fallback set. `boxes` are `(w, h)` at
/// `cfg.resolution`.
pub fn choose_anchors(cfg: &RunConfig, maps: usize, boxes: &[(f64, f64)]) -> Result<AnchorSet, HeadError> {
    if cfg.head.paradigm == Paradigm::AnchorFree {
        return Ok(vec![Vec::new(); maps]);
    }
    let per = cfg.head.anchors_per_scale;
    if let Some(file) = &cfg.head.anchor_file {
        let path = data_path(file);
        let set = load_anchor_file(&path)?;
        if set.len() < maps {
            return Err(HeadError::AnchorFile { path, reason: format!("{} prior groups for {maps} prediction maps", set.len()) });
        }
        let set = set[set.len() - maps..].to_vec();
        if set.iter().any(|g| g.len() != per) {
            return Err(HeadError::AnchorFile { path, reason: format!("every group needs anchors_per_scale = {per} priors") });
        }
        return Ok(set);
    }
    match kmeans_anchors(boxes, per * maps, 100) {
        Some(c) => Ok(split_by_area(c, maps)),
        None => Ok(fallback_anchors(maps, per, cfg.resolution)),
    }
}

/// Letterbox an original image into the square network input.
pub fn prepare_image(img: &Image, side: usize) -> (Image, Letterbox) {
    let (h, w, _) = img.dim();
    let lb = Letterbox::new(w, h, side);
    (lb.apply(img), lb)
}

impl Model {
    /// Allocate every parameter in `ps` in a fixed order.
    pub fn build<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        cfg: &RunConfig,
        vocab: Vocabulary,
        table: &EmbeddingTable,
        anchors: AnchorSet,
        rng: &mut R,
    ) -> Result<(Self, WeightReport), ModelError> {
        let (backbone, report) = Backbone::build(ps, &cfg.backbone(), rng)?;
        Ok((Self::assemble(ps, cfg, backbone, vocab, table, anchors, rng)?, report))
    }

    /// Everything after the backbone, which the caller has already built.
    pub fn assemble<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        cfg: &RunConfig,
        backbone: Backbone,
        vocab: Vocabulary,
        table: &EmbeddingTable,
        anchors: AnchorSet,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let levels = backbone.levels();
        if cfg.scales_used > levels.len() {
            return Err(VisError::Config(format!("scales_used {} but the backbone has {} levels", cfg.scales_used, levels.len())).into());
        }
        let used = &levels[levels.len() - cfg.scales_used..];
        let text = TextEncoder::new(ps, &cfg.textenc, table, rng);
        let fusion = Fusion::new(ps, &cfg.fusion, used, cfg.textenc.hidden_dim, rng)?;
        let strides = head_strides(&used.iter().map(|l| l.stride).collect::<Vec<_>>(), cfg.fusion.head_per_scale);
        if anchors.len() != strides.len() {
            return Err(HeadError::Config(format!("{} prior groups for {} prediction maps", anchors.len(), strides.len())).into());
        }
        let head = DetHead::new(ps, &cfg.head, cfg.fusion.dim, strides.len(), rng);
        Ok(Self {
            backbone,
            text,
            fusion,
            head,
            vocab,
            anchors,
            resolution: cfg.resolution,
            scales_used: cfg.scales_used,
            max_len: cfg.textenc.max_len,
            literal: cfg.head.literal_exponent,
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        let levels = self.backbone.levels();
        let used: Vec<usize> = levels[levels.len() - self.scales_used..].iter().map(|l| l.stride).collect();
        head_strides(&used, self.fusion.cfg.head_per_scale)
    }

    /// Grid geometry at input side `side`; priors scale with `side / resolution`.
    pub fn geoms(&self, side: usize) -> Vec<GridGeom> {
        let s = side as f64 / self.resolution as f64;
        self.strides()
            .into_iter()
            .zip(&self.anchors)
            .map(|(stride, priors)| GridGeom {
                h: side / stride,
                w: side / stride,
                stride,
                priors: priors.iter().map(|&(w, h)| (w * s, h * s)).collect(),
            })
            .collect()
    }

    pub fn tokens(&self, expression: &str) -> Result<TokenSequence, DataError> {
        encode_expression(&tokenize(expression), &self.vocab, self.max_len)
    }

    /// Raw `B×h×w×n×5` grids for `B×3×S×S` images.
    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, images: Var<'g, T>, tokens: &[TokenSequence]) -> Result<Vec<Var<'g, T>>, ModelError> {
        let pyramid = self.backbone.extract(f, images, self.scales_used)?;
        let text = self.text.encode(f, tokens)?;
        let maps = self.fusion.forward(f, &pyramid, text.pooled)?;
        Ok(self.head.forward(f, &maps))
    }

    /// Raw grids as plain arrays, one `Vec` per sample.
    pub fn infer<T: Real>(&self, ps: &ParamStore<T>, images: &[&Image], tokens: &[TokenSequence]) -> Result<Vec<Vec<PredictionGrid<f64>>>, ModelError> {
        let side = images[0].dim().0;
        let g = Graph::inference();
        let f = Fwd::eval(&g, ps);
        let x = g.constant(to_nchw::<T>(images).into_dyn());
        let raws = self.forward(&f, x, tokens)?;
        let geoms = self.geoms(side);
        let values: Vec<ArrayD<f64>> = raws.iter().map(|r| r.value().mapv(|v| v.to_f64_lossy())).collect();
        Ok((0..images.len())
            .map(|b| values.iter().zip(&geoms).map(|(v, geom)| PredictionGrid::new(v.index_axis(Axis(0), b).to_owned(), geom.clone())).collect())
            .collect())
    }

    /// Highest-confidence box per sample, mapped back through its letterbox.
    pub fn predict<T: Real>(
        &self,
        ps: &ParamStore<T>,
        images: &[&Image],
        tokens: &[TokenSequence],
        letterboxes: &[Letterbox],
    ) -> Result<Vec<Prediction>, ModelError> {
        let grids = self.infer(ps, images, tokens)?;
        Ok(grids
            .iter()
            .zip(letterboxes)
            .map(|(g, lb)| {
                let sel = select_prediction(g, self.literal).expect("grids are never empty");
                Prediction { bbox: lb.inverse_box(&sel.bbox), confidence: sel.confidence, selection: sel }
            })
            .collect())
    }
}
