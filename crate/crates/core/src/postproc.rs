//! Ordered full-frame image stages applied after compositing.
//!
//! Stages are built from declarative `{name, params}` records through a
//! [`Registry`]. A chain is resolved completely before any pixel is touched,
//! so an unknown stage name fails the whole chain up front.

use crate::raster::Mask;
use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostError {
    #[error("unknown post-processing stage {0:?}")]
    UnknownStage(String),
    #[error("invalid parameters for stage {stage:?}: {message}")]
    InvalidParams { stage: String, message: String },
    #[error("stage {stage:?} failed: {message}")]
    StageFailed { stage: String, message: String },
    #[error("stage {stage:?} changed the image size from {before:?} to {after:?}")]
    DimensionChanged { stage: String, before: (u32, u32), after: (u32, u32) },
}

/// Per-image inputs that some stages need besides the pixels.
#[derive(Debug, Clone, Default)]
pub struct PostContext {
    /// Seed for stochastic stages, derived per frame and camera by the caller.
    pub seed: u64,
    /// Pixels covered by rendered assets.
    pub coverage: Option<Mask>,
    /// Image-space ground outlines of inserted assets, one polygon each.
    pub footprints: Vec<Vec<[f64; 2]>>,
}

pub trait PostStage: Send + Sync {
    fn name(&self) -> &str;

    /// Pure stages give identical output for identical input and context.
    fn deterministic(&self) -> bool {
        true
    }

    fn apply(&self, image: &RgbImage, ctx: &PostContext) -> Result<RgbImage, PostError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    #[serde(default = "empty_params")]
    pub params: Value,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

fn empty_params() -> Value {
    Value::Object(Default::default())
}

fn enabled() -> bool {
    true
}

impl StageConfig {
    pub fn new(name: impl Into<String>, params: Value) -> Self {
        Self { name: name.into(), params, enabled: true }
    }
}

pub type StageFactory = Arc<dyn Fn(&Value) -> Result<Box<dyn PostStage>, PostError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct Registry {
    factories: BTreeMap<String, StageFactory>,
}

fn params<T: DeserializeOwned>(stage: &str, v: &Value) -> Result<T, PostError> {
    let v = if v.is_null() { empty_params() } else { v.clone() };
    serde_json::from_value(v).map_err(|e| PostError::InvalidParams { stage: stage.to_string(), message: e.to_string() })
}

fn check(stage: &str, ok: bool, message: &str) -> Result<(), PostError> {
    if ok {
        Ok(())
    } else {
        Err(PostError::InvalidParams { stage: stage.to_string(), message: message.to_string() })
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding every built-in stage.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("brightness", |v| Ok(Box::new(params::<Brightness>("brightness", v)?)));
        r.register("contrast", |v| {
            let s: Contrast = params("contrast", v)?;
            check("contrast", s.factor.is_finite() && s.factor >= 0.0, "factor must be finite and >= 0")?;
            Ok(Box::new(s))
        });
        r.register("gamma", |v| {
            let s: Gamma = params("gamma", v)?;
            check("gamma", s.gamma.is_finite() && s.gamma > 0.0, "gamma must be positive")?;
            Ok(Box::new(s))
        });
        r.register("color_temperature", |v| Ok(Box::new(params::<ColorTemperature>("color_temperature", v)?)));
        r.register("night", |v| {
            let s: Night = params("night", v)?;
            check("night", (0.0..=1.0).contains(&s.darkness), "darkness must be in [0, 1]")?;
            check("night", s.blur_sigma >= 0.0, "blur_sigma must be >= 0")?;
            Ok(Box::new(s))
        });
        r.register("rain", |v| {
            let s: Rain = params("rain", v)?;
            check("rain", (0.0..=1.0).contains(&s.density), "density must be in [0, 1]")?;
            check("rain", (0.0..=1.0).contains(&s.intensity), "intensity must be in [0, 1]")?;
            Ok(Box::new(s))
        });
        r.register("ground_shadow", |v| {
            let s: GroundShadow = params("ground_shadow", v)?;
            check("ground_shadow", (0.0..=1.0).contains(&s.darkness), "darkness must be in [0, 1]")?;
            Ok(Box::new(s))
        });
        r.register("external", |v| {
            let s: External = params("external", v)?;
            check("external", !s.command.is_empty(), "command must not be empty")?;
            Ok(Box::new(s))
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: impl Fn(&Value) -> Result<Box<dyn PostStage>, PostError> + Send + Sync + 'static) {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Instantiates every enabled stage, failing on the first unknown name
    /// or bad parameter set.
    pub fn resolve(&self, configs: &[StageConfig]) -> Result<Vec<Box<dyn PostStage>>, PostError> {
        configs
            .iter()
            .filter(|c| c.enabled)
            .map(|c| self.factories.get(&c.name).ok_or_else(|| PostError::UnknownStage(c.name.clone())).and_then(|f| f(&c.params)))
            .collect()
    }
}

/// Left fold of `stages` over `image`. The empty chain returns a copy.
pub fn apply_chain(image: &RgbImage, stages: &[Box<dyn PostStage>], ctx: &PostContext) -> Result<RgbImage, PostError> {
    let mut cur = image.clone();
    for s in stages {
        let next = s.apply(&cur, ctx)?;
        if next.dimensions() != cur.dimensions() {
            return Err(PostError::DimensionChanged { stage: s.name().to_string(), before: cur.dimensions(), after: next.dimensions() });
        }
        cur = next;
    }
    Ok(cur)
}

/// Resolves `configs` against `registry`, then applies them.
pub fn run_chain(registry: &Registry, configs: &[StageConfig], image: &RgbImage, ctx: &PostContext) -> Result<RgbImage, PostError> {
    let stages = registry.resolve(configs)?;
    apply_chain(image, &stages, ctx)
}

fn map_channels(image: &RgbImage, f: impl Fn(usize, u8) -> u8) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        for (c, v) in p.0.iter_mut().enumerate() {
            *v = f(c, *v);
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luminance(p: &Rgb<u8>) -> f64 {
    0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64
}

/// Adds `amount` to every channel.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Brightness {
    pub amount: i32,
}

impl PostStage for Brightness {
    fn name(&self) -> &str {
        "brightness"
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        Ok(map_channels(image, |_, v| (v as i32 + self.amount).clamp(0, 255) as u8))
    }
}

/// Scales channel values about mid-gray.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub factor: f64,
}

impl PostStage for Contrast {
    fn name(&self) -> &str {
        "contrast"
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        Ok(map_channels(image, |_, v| clamp_u8(128.0 + (v as f64 - 128.0) * self.factor)))
    }
}

/// `out = 255 * (in / 255) ^ (1 / gamma)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gamma {
    pub gamma: f64,
}

impl PostStage for Gamma {
    fn name(&self) -> &str {
        "gamma"
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        let lut: Vec<u8> = (0..=255u32).map(|v| clamp_u8(255.0 * (v as f64 / 255.0).powf(1.0 / self.gamma))).collect();
        Ok(map_channels(image, |_, v| lut[v as usize]))
    }
}

/// Positive `shift` warms the image (more red, less blue).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorTemperature {
    pub shift: i32,
}

impl PostStage for ColorTemperature {
    fn name(&self) -> &str {
        "color_temperature"
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        Ok(map_channels(image, |c, v| match c {
            0 => (v as i32 + self.shift).clamp(0, 255) as u8,
            2 => (v as i32 - self.shift).clamp(0, 255) as u8,
            _ => v,
        }))
    }
}

/// Blurs and darkens the frame; pixels brighter than `highlight_threshold`
/// (luma) keep their original value, so lamps stay lit.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Night {
    pub darkness: f64,
    pub blur_sigma: f32,
    pub highlight_threshold: f64,
    /// Blue tint added to darkened pixels.
    pub tint: i32,
}

impl Default for Night {
    fn default() -> Self {
        Self { darkness: 0.65, blur_sigma: 1.2, highlight_threshold: 230.0, tint: 12 }
    }
}

impl PostStage for Night {
    fn name(&self) -> &str {
        "night"
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        let blurred = if self.blur_sigma > 0.0 { imageops::blur(image, self.blur_sigma) } else { image.clone() };
        let keep = 1.0 - self.darkness;
        let mut out = blurred;
        for (o, src) in out.pixels_mut().zip(image.pixels()) {
            if luminance(src) >= self.highlight_threshold {
                *o = *src;
                continue;
            }
            let [r, g, b] = o.0;
            *o = Rgb([clamp_u8(r as f64 * keep), clamp_u8(g as f64 * keep), clamp_u8(b as f64 * keep + self.tint as f64)]);
        }
        Ok(out)
    }
}

/// Procedural rain streaks. The streak layout depends only on the image
/// size, the stage `seed` and the context seed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rain {
    /// Streaks per pixel.
    pub density: f64,
    pub length: u32,
    /// Horizontal pixels per vertical pixel.
    pub slant: f64,
    /// Blend weight toward the streak color.
    pub intensity: f64,
    pub seed: u64,
    /// Dim the whole frame slightly, as overcast weather does.
    pub dim: f64,
}

impl Default for Rain {
    fn default() -> Self {
        Self { density: 0.002, length: 14, slant: 0.25, intensity: 0.45, seed: 0, dim: 0.85 }
    }
}

impl PostStage for Rain {
    fn name(&self) -> &str {
        "rain"
    }

    fn apply(&self, image: &RgbImage, ctx: &PostContext) -> Result<RgbImage, PostError> {
        let (w, h) = image.dimensions();
        let mut out = map_channels(image, |_, v| clamp_u8(v as f64 * self.dim));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ctx.seed.rotate_left(17));
        let streaks = (self.density * w as f64 * h as f64).round() as usize;
        for _ in 0..streaks {
            let x0 = rng.random_range(0.0..w as f64);
            let y0 = rng.random_range(0.0..h as f64);
            let len = rng.random_range(self.length / 2..=self.length.max(1));
            for t in 0..len {
                let x = (x0 + self.slant * t as f64).round();
                let y = y0 + t as f64;
                if x < 0.0 || x >= w as f64 || y >= h as f64 {
                    break;
                }
                let p = out.get_pixel_mut(x as u32, y as u32);
                for v in p.0.iter_mut() {
                    *v = clamp_u8(*v as f64 * (1.0 - self.intensity) + 215.0 * self.intensity);
                }
            }
        }
        Ok(out)
    }
}

/// Darkens each context footprint polygon, scaled about its centroid, on
/// pixels that no rendered asset covers.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundShadow {
    pub darkness: f64,
    pub scale: f64,
}

impl Default for GroundShadow {
    fn default() -> Self {
        Self { darkness: 0.45, scale: 1.1 }
    }
}

/// Even-odd point-in-polygon test.
fn inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            c = !c;
        }
    }
    c
}

impl PostStage for GroundShadow {
    fn name(&self) -> &str {
        "ground_shadow"
    }

    fn apply(&self, image: &RgbImage, ctx: &PostContext) -> Result<RgbImage, PostError> {
        let (w, h) = image.dimensions();
        if let Some(c) = &ctx.coverage {
            if c.dims() != (w, h) {
                return Err(PostError::StageFailed { stage: self.name().into(), message: "coverage size differs from image".into() });
            }
        }
        let mut out = image.clone();
        for poly in ctx.footprints.iter().filter(|p| p.len() >= 3) {
            let n = poly.len() as f64;
            let (mx, my) = poly.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0] / n, y + p[1] / n));
            let scaled: Vec<[f64; 2]> = poly.iter().map(|p| [mx + (p[0] - mx) * self.scale, my + (p[1] - my) * self.scale]).collect();
            let (lo_x, hi_x) = scaled.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
            let (lo_y, hi_y) = scaled.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
            let (x0, x1) = (lo_x.ceil().max(0.0), hi_x.floor().min(w as f64 - 1.0));
            let (y0, y1) = (lo_y.ceil().max(0.0), hi_y.floor().min(h as f64 - 1.0));
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            for y in y0 as u32..=y1 as u32 {
                for x in x0 as u32..=x1 as u32 {
                    let covered = ctx.coverage.as_ref().is_some_and(|c| *c.get(x, y));
                    if !covered && inside(&scaled, x as f64, y as f64) {
                        let p = out.get_pixel_mut(x, y);
                        for v in p.0.iter_mut() {
                            *v = clamp_u8(*v as f64 * (1.0 - self.darkness));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Hands the frame to an external program through PNG files. Arguments
/// equal to `{input}` / `{output}` are replaced by the file paths.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct External {
    pub command: Vec<String>,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

impl PostStage for External {
    fn name(&self) -> &str {
        "external"
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn apply(&self, image: &RgbImage, _: &PostContext) -> Result<RgbImage, PostError> {
        let fail = |m: String| PostError::StageFailed { stage: "external".into(), message: m };
        let dir = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("output.png");
        image.save(&input).map_err(|e| fail(e.to_string()))?;
        let args: Vec<String> = self
            .command
            .iter()
            .map(|a| a.replace("{input}", &input.to_string_lossy()).replace("{output}", &output.to_string_lossy()))
            .collect();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..]);
        if let Some(wd) = &self.workdir {
            cmd.current_dir(wd);
        }
        let status = cmd.status().map_err(|e| fail(format!("cannot run {:?}: {e}", args[0])))?;
        if !status.success() {
            return Err(fail(format!("{:?} exited with {status}", args[0])));
        }
        let out = image::open(&output).map_err(|e| fail(format!("cannot read output: {e}")))?;
        Ok(out.to_rgb8())
    }
}
