//! Multistage spatial attention: image to `N` attention points.
//!
//! A 1x1 projection of the image is the key. Three same-resolution conv stages
//! each project to an `N`-channel query; every query is multiplied with the key
//! per channel and pixel, the maps are averaged and normalised, and a tempered
//! soft-argmax over each channel yields one point per channel.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchNorm2d, Conv2d, Float, ParamStore, Session, Tape, Var};
use crate::error::{Error, Result};

/// Number of convolution stages.
pub const N_STAGES: usize = 3;

/// Which stages contribute attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// All three stages are queried and fused.
    #[default]
    Msa,
    /// Only the final stage is queried.
    Sa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaConfig {
    pub n_points: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub stage_channels: [usize; N_STAGES],
    pub temperature: f64,
    pub backbone: Backbone,
}

impl Default for MsaConfig {
    fn default() -> Self {
        MsaConfig {
            n_points: 6,
            image_h: 20,
            image_w: 20,
            stage_channels: [8, 8, 8],
            temperature: 0.001,
            backbone: Backbone::Msa,
        }
    }
}

impl MsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidArgument("n_points must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.image_h < 8 || self.image_w < 8 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 8x8, got {}x{}",
                self.image_h, self.image_w
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::InvalidArgument("stage channels must be positive".into()));
        }
        Ok(())
    }

    /// 1-based indices of the stages whose queries are used.
    pub fn query_stages(&self) -> &'static [usize] {
        match self.backbone {
            Backbone::Msa => &[1, 2, 3],
            Backbone::Sa => &[3],
        }
    }
}

/// Normalised pixel coordinates: row `h / (H - 1)` and column `w / (W - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub height: usize,
    pub width: usize,
    /// Row coordinate of every cell, row-major.
    pub rows: Vec<f64>,
    /// Column coordinate of every cell, row-major.
    pub cols: Vec<f64>,
}

pub fn positional_embedding(height: usize, width: usize) -> Result<PositionalEmbedding> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs at least 2x2 cells, got {height}x{width}"
        )));
    }
    let mut rows = Vec::with_capacity(height * width);
    let mut cols = Vec::with_capacity(height * width);
    for h in 0..height {
        for w in 0..width {
            rows.push(h as f64 / (height - 1) as f64);
            cols.push(w as f64 / (width - 1) as f64);
        }
    }
    Ok(PositionalEmbedding {
        height,
        width,
        rows,
        cols,
    })
}

impl PositionalEmbedding {
    pub fn at(&self, h: usize, w: usize) -> (f64, f64) {
        let i = h * self.width + w;
        (self.rows[i], self.cols[i])
    }

    pub fn rows_as<F: Float>(&self) -> Vec<F> {
        self.rows.iter().map(|&v| F::lit(v)).collect()
    }

    pub fn cols_as<F: Float>(&self) -> Vec<F> {
        self.cols.iter().map(|&v| F::lit(v)).collect()
    }
}

/// `N` points as `(y, x)` pairs in normalised image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoints {
    pub points: Vec<[f32; 2]>,
}

impl AttentionPoints {
    /// Builds points from a flat `[y0, x0, y1, x1, ...]` slice.
    pub fn from_flat<F: Float>(flat: &[F]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::shape("attention_points", format!("odd length {}", flat.len())));
        }
        Ok(AttentionPoints {
            points: flat
                .chunks_exact(2)
                .map(|p| [p[0].as_f64() as f32, p[1].as_f64() as f32])
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn in_unit_square(&self) -> bool {
        self.points.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Per-channel product of query and key scaled by `1 / sqrt(H * W)`.
pub fn attention_map<F: Float>(tape: &mut Tape<F>, query: Var, key: Var) -> Result<Var> {
    let shape = tape.shape(query);
    if shape.len() < 2 {
        return Err(Error::shape(
            "attention_map",
            format!("needs spatial axes, got {shape:?}"),
        ));
    }
    let hw = (shape[shape.len() - 2] * shape[shape.len() - 1]) as f64;
    tape.mul_scaled(query, key, F::lit(1.0 / hw.sqrt()))
}

/// Tempered softmax over each channel followed by the expected embedding.
///
/// `fused` is `[..., H, W]`; the result is `[..., 2]` holding `(y, x)`.
pub fn soft_argmax<F: Float>(
    tape: &mut Tape<F>,
    fused: Var,
    pe: &PositionalEmbedding,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.shape(fused);
    let n = shape.len();
    if n < 2 || shape[n - 2] != pe.height || shape[n - 1] != pe.width {
        return Err(Error::shape(
            "soft_argmax",
            format!("map {shape:?} vs embedding {}x{}", pe.height, pe.width),
        ));
    }
    tape.softmax_expect(fused, F::lit(temperature), &pe.rows_as(), &pe.cols_as())
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

/// Intermediate maps of one extraction, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct MsaOutput {
    /// `[B, N, 2]` points.
    pub points: Var,
    pub key: Var,
    /// One query per queried stage, in stage order.
    pub queries: Vec<Var>,
    /// One attention map per queried stage, in stage order.
    pub maps: Vec<Var>,
    pub fused: Var,
}

impl MsaOutput {
    pub fn points_of<F: Float>(&self, tape: &Tape<F>, frame: usize) -> Result<AttentionPoints> {
        let shape = tape.shape(self.points);
        if frame >= shape[0] {
            return Err(Error::InvalidArgument(format!("frame {frame} out of {}", shape[0])));
        }
        let per = shape[1] * 2;
        AttentionPoints::from_flat(&tape.value(self.points).data()[frame * per..][..per])
    }
}

/// Parameters of the attention extractor. Both stereo views use the same instance.
#[derive(Clone, Debug)]
pub struct Msa {
    cfg: MsaConfig,
    pe: PositionalEmbedding,
    key: ConvBn,
    stages: Vec<ConvBn>,
    /// Indexed by stage; `None` where the backbone does not query the stage.
    queries: Vec<Option<ConvBn>>,
    fuse_bn: BatchNorm2d,
}

impl Msa {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &MsaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_points;
        let key = ConvBn::new(store, &format!("{prefix}.key"), 3, n, 1, rng)?;
        let mut stages = Vec::with_capacity(N_STAGES);
        let mut queries = Vec::with_capacity(N_STAGES);
        let mut c_in = 3;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let stage = i + 1;
            stages.push(ConvBn::new(store, &format!("{prefix}.stage{stage}"), c_in, c, 3, rng)?);
            queries.push(if cfg.query_stages().contains(&stage) {
                Some(ConvBn::new(store, &format!("{prefix}.query{stage}"), c, n, 1, rng)?)
            } else {
                None
            });
            c_in = c;
        }
        let fuse_bn = BatchNorm2d::new(store, &format!("{prefix}.fuse.bn"), n)?;
        Ok(Msa {
            cfg: cfg.clone(),
            pe: positional_embedding(cfg.image_h, cfg.image_w)?,
            key,
            stages,
            queries,
            fuse_bn,
        })
    }

    pub fn config(&self) -> &MsaConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &PositionalEmbedding {
        &self.pe
    }

    fn check_image<F: Float>(&self, tape: &Tape<F>, image: Var) -> Result<()> {
        let shape = tape.shape(image);
        let ok = shape.len() == 4 && shape[1] == 3 && shape[2] == self.cfg.image_h && shape[3] == self.cfg.image_w;
        if !ok {
            return Err(Error::shape(
                "msa",
                format!(
                    "expected [B,3,{},{}] images, got {shape:?}",
                    self.cfg.image_h, self.cfg.image_w
                ),
            ));
        }
        Ok(())
    }

    /// 1x1 projection of `[B,3,H,W]` images to the `N`-channel key.
    pub fn project_key<F: Float>(&self, s: &mut Session<'_, F>, image: Var) -> Result<Var> {
        self.check_image(&s.tape, image)?;
        self.key.forward(s, image)
    }

    /// Runs stage `stage` (1-based) and its query projection when the backbone uses it.
    pub fn stage_forward<F: Float>(&self, s: &mut Session<'_, F>, x: Var, stage: usize) -> Result<(Var, Option<Var>)> {
        if !(1..=N_STAGES).contains(&stage) {
            return Err(Error::InvalidArgument(format!(
                "stage index {stage} outside 1..={N_STAGES}"
            )));
        }
        let y = self.stages[stage - 1].forward(s, x)?;
        let features = s.tape.relu(y);
        let query = match &self.queries[stage - 1] {
            Some(q) => Some(q.forward(s, features)?),
            None => None,
        };
        Ok((features, query))
    }

    /// Mean of the attention maps followed by batch normalisation.
    pub fn fuse_maps<F: Float>(&self, s: &mut Session<'_, F>, maps: &[Var]) -> Result<Var> {
        let want = self.cfg.query_stages().len();
        if maps.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} attention maps, got {}",
                maps.len()
            )));
        }
        let mean = if maps.len() == 1 {
            maps[0]
        } else {
            s.tape.mean_of(maps)?
        };
        self.fuse_bn.forward(s, mean)
    }

    /// Full extraction for a `[B,3,H,W]` batch.
    pub fn extract_points<F: Float>(&self, s: &mut Session<'_, F>, images: Var) -> Result<MsaOutput> {
        let key = self.project_key(s, images)?;
        let mut x = images;
        let mut queries = Vec::new();
        let mut maps = Vec::new();
        for stage in 1..=N_STAGES {
            let (features, query) = self.stage_forward(s, x, stage)?;
            if let Some(q) = query {
                maps.push(attention_map(&mut s.tape, q, key)?);
                queries.push(q);
            }
            x = features;
        }
        let fused = self.fuse_maps(s, &maps)?;
        let points = soft_argmax(&mut s.tape, fused, &self.pe, self.cfg.temperature)?;
        Ok(MsaOutput {
            points,
            key,
            queries,
            maps,
            fused,
        })
    }
}

#[derive(Serialize)]
struct MapRecord {
    file: String,
    map: String,
    channel: usize,
    argmax: [usize; 2],
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct DiagnosticSidecar {
    frame: usize,
    height: usize,
    width: usize,
    points: Vec<[f32; 2]>,
    maps: Vec<MapRecord>,
}

/// Writes every channel of each attention map and the fused map of one frame
/// as min-max scaled binary PGM images, plus `attention.json` with the argmax
/// cell of each.
pub fn export_diagnostics<F: Float>(
    dir: &Path,
    msa: &Msa,
    tape: &Tape<F>,
    out: &MsaOutput,
    frame: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (msa.cfg.image_h, msa.cfg.image_w);
    let n = msa.cfg.n_points;
    let mut named: Vec<(String, Var)> = msa
        .cfg
        .query_stages()
        .iter()
        .zip(&out.maps)
        .map(|(s, &m)| (format!("stage{s}"), m))
        .collect();
    named.push(("fused".into(), out.fused));

    let mut records = Vec::new();
    for (name, var) in named {
        let data = tape.value(var).data();
        for ch in 0..n {
            let plane = &data[(frame * n + ch) * h * w..][..h * w];
            let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.as_f64()), hi.max(v.as_f64()))
            });
            let mut best = 0;
            for (i, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = i;
                }
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
            pgm.extend(plane.iter().map(|v| ((v.as_f64() - lo) / span * 255.0).round() as u8));
            let file = format!("{name}_c{ch}.pgm");
            let path = dir.join(&file);
            fs::write(&path, pgm).map_err(|e| Error::io(&path, e))?;
            records.push(MapRecord {
                file,
                map: name.clone(),
                channel: ch,
                argmax: [best / w, best % w],
                min: lo,
                max: hi,
            });
        }
    }
    let sidecar = DiagnosticSidecar {
        frame,
        height: h,
        width: w,
        points: out.points_of(tape, frame)?.points,
        maps: records,
    };
    let path = dir.join("attention.json");
    fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
