//! Flat `key = value` run configuration with `include` support.

use std::path::{Path, PathBuf};

use crate::bitstream::{parse_pattern, QpSchedule, DEFAULT_PATTERN, QP_MAX};
use crate::error::{Error, Result};
use crate::fusion::CrossViewMode;
use crate::gaussians::GaussianConfig;
use crate::stereo::StereoConfig;
use crate::transforms::{CodecConfig, DEFAULT_GOP};

const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub base_qp: u8,
    pub pattern: Vec<u8>,
    pub gop: usize,
    /// SSIM share of the novel-view distortion.
    pub alpha: f64,
    /// Weight of the source reconstruction term.
    pub beta: f64,
    /// Weight of the disparity loss.
    pub gamma: f64,
    pub lr: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Consecutive frames per training sample.
    pub clip_len: usize,
    pub seed: u64,
    pub mode: CrossViewMode,
    pub background: [f64; 3],
    pub codec: CodecConfig,
    pub stereo: StereoConfig,
    pub gauss: GaussianConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_qp: 23,
            pattern: DEFAULT_PATTERN.to_vec(),
            gop: DEFAULT_GOP,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.05,
            lr: 1e-4,
            stage1_steps: 5000,
            stage2_steps: 5000,
            clip_len: 2,
            seed: 0,
            mode: CrossViewMode::Fused,
            background: [0.0; 3],
            codec: CodecConfig::default(),
            stereo: StereoConfig::default(),
            gauss: GaussianConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset sized for 64x64 synthetic scenes on one CPU core.
    pub fn toy() -> Self {
        let codec = CodecConfig { c_f: 16, c_y_img: 16, c_y_disp: 8, c_z: 8, c_h: 16, blocks: 1, ..Default::default() };
        RunConfig {
            lr: 2e-3,
            stage1_steps: 4000,
            stage2_steps: 400,
            codec,
            stereo: StereoConfig { feat_channels: 16, hidden: 16, blocks: 1, d_max: 4, iters: 3, ..Default::default() },
            gauss: GaussianConfig { c_f: codec.c_f, blocks: 1, d_ref: 10.0, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn schedule(&self) -> Result<QpSchedule> {
        QpSchedule::new(self.base_qp, self.pattern.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.alpha > 1.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative and alpha <= 1".into()));
        }
        if self.base_qp > QP_MAX || self.pattern.is_empty() {
            return Err(Error::InvalidArgument("qp out of range or empty pattern".into()));
        }
        if self.gauss.c_f != self.codec.c_f {
            return Err(Error::InvalidArgument("gaussian trunk width must match codec feature width".into()));
        }
        if self.clip_len == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("clip_len and lr must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("config `{key}` = `{value}`: {e}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|e| bad(&e))?
            };
        }
        match key {
            "qp" => self.base_qp = num!(),
            "pattern" => self.pattern = parse_pattern(value)?,
            "gop" => self.gop = num!(),
            "alpha" => self.alpha = num!(),
            "beta" => self.beta = num!(),
            "gamma" => self.gamma = num!(),
            "lr" => self.lr = num!(),
            "stage1_steps" => self.stage1_steps = num!(),
            "stage2_steps" => self.stage2_steps = num!(),
            "clip_len" => self.clip_len = num!(),
            "seed" => self.seed = num!(),
            "mode" => self.mode = parse_mode(value).ok_or_else(|| bad(&"expected fused, hardwarp or off"))?,
            "background" => {
                let v: Vec<f64> = value.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(&e))?;
                self.background = v.try_into().map_err(|_| bad(&"expected three components"))?;
            }
            "c_f" => {
                self.codec.c_f = num!();
                self.gauss.c_f = self.codec.c_f;
            }
            "c_y_img" => self.codec.c_y_img = num!(),
            "c_y_disp" => self.codec.c_y_disp = num!(),
            "c_z" => self.codec.c_z = num!(),
            "c_h" => self.codec.c_h = num!(),
            "codec_blocks" => self.codec.blocks = num!(),
            "d_ceiling" => self.codec.d_ceiling = num!(),
            "disp_unit" => {
                self.codec.disp_unit = num!();
                self.gauss.disp_unit = self.codec.disp_unit;
            }
            "stereo_feat" => self.stereo.feat_channels = num!(),
            "stereo_hidden" => self.stereo.hidden = num!(),
            "stereo_blocks" => self.stereo.blocks = num!(),
            "d_max" => self.stereo.d_max = num!(),
            "iters" => self.stereo.iters = num!(),
            "mu" => self.stereo.mu = num!(),
            "lookup_radius" => self.stereo.lookup_radius = num!(),
            "temperature" => self.stereo.temperature = num!(),
            "gs_blocks" => self.gauss.blocks = num!(),
            "s_max" => self.gauss.s_max = num!(),
            "color_amp" => self.gauss.color_amp = num!(),
            "depth_amp" => self.gauss.depth_amp = num!(),
            "d_ref" => self.gauss.d_ref = num!(),
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every assignment of `text`; `include` paths resolve against `base_dir`.
    pub fn apply_str(&mut self, text: &str, base_dir: &Path) -> Result<()> {
        self.apply_inner(text, base_dir, 0)
    }

    fn apply_inner(&mut self, text: &str, base_dir: &Path, depth: usize) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
            if key == "include" {
                if depth >= MAX_INCLUDE_DEPTH {
                    return Err(Error::InvalidArgument("config includes nest too deeply".into()));
                }
                let path = base_dir.join(value);
                let text = std::fs::read_to_string(&path)?;
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
                self.apply_inner(&text, &dir, depth + 1)?;
            } else {
                self.set(key, value)?;
            }
        }
        Ok(())
    }

    /// Toy preset overridden by the file at `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = RunConfig::toy();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply_str(&std::fs::read_to_string(path)?, &dir)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_mode(s: &str) -> Option<CrossViewMode> {
    match s.to_ascii_lowercase().as_str() {
        "fused" | "full" => Some(CrossViewMode::Fused),
        "hardwarp" | "hard" => Some(CrossViewMode::HardWarp),
        "off" | "none" => Some(CrossViewMode::Off),
        _ => None,
    }
}

pub fn mode_name(m: CrossViewMode) -> &'static str {
    match m {
        CrossViewMode::Fused => "fused",
        CrossViewMode::HardWarp => "hardwarp",
        CrossViewMode::Off => "off",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_weights() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta, c.gamma, c.lr), (0.2, 0.2, 0.05, 1e-4));
        assert_eq!(c.stereo.mu, 0.9);
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn include_and_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "qp = 31\nmode = off\ngamma = 0.1 # comment\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nqp = 39\npattern = 0,4\nbackground = 0.1,0.2,0.3\n").unwrap();
        let c = RunConfig::load(dir.path().join("run.cfg")).unwrap();
        assert_eq!(c.base_qp, 39);
        assert_eq!(c.pattern, vec![0, 4]);
        assert_eq!(c.mode, CrossViewMode::Off);
        assert_eq!(c.gamma, 0.1);
        assert_eq!(c.background, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::toy();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("alpha", "x").is_err());
        assert!(c.apply_str("just words", Path::new(".")).is_err());
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("loop.cfg"), "include = loop.cfg\n").unwrap();
        assert!(RunConfig::load(dir.path().join("loop.cfg")).is_err());
    }
}
