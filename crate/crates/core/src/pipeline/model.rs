//! Complete network: stereo estimator, codec, entropy models and Gaussian
//! heads, with the architecture stored alongside the weights.

use std::path::Path;

use crate::entropy::init_entropy;
use crate::error::{Error, Result};
use crate::fusion::CrossViewMode;
use crate::gaussians::{init_gaussians, GaussianConfig};
use crate::params::{Init, ParamSet};
use crate::stereo::{init_stereo, StereoConfig};
use crate::tensor::Tensor;
use crate::transforms::{init_transforms, CodecConfig};

use super::config::RunConfig;

/// Checkpoint entry holding the architecture numbers; never trained.
pub const ARCH_KEY: &str = "model.arch";
const ARCH_LEN: usize = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub codec: CodecConfig,
    pub stereo: StereoConfig,
    pub gauss: GaussianConfig,
    pub mode: CrossViewMode,
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(cfg.seed);
        init_stereo(&mut params, &mut init, &cfg.stereo);
        init_transforms(&mut params, &mut init, &cfg.codec);
        init_entropy(&mut params, &mut init, &cfg.codec);
        init_gaussians(&mut params, &mut init, &cfg.gauss);
        let mut model = Model { params, codec: cfg.codec, stereo: cfg.stereo, gauss: cfg.gauss, mode: cfg.mode };
        model.params.insert(ARCH_KEY, model.arch_tensor());
        model.snap_to_storage();
        Self::from_params(model.params)
    }

    fn arch_tensor(&self) -> Tensor {
        let (c, s, g) = (&self.codec, &self.stereo, &self.gauss);
        let v = vec![
            c.c_f as f64,
            c.c_y_img as f64,
            c.c_y_disp as f64,
            c.c_z as f64,
            c.c_h as f64,
            c.blocks as f64,
            c.d_ceiling,
            c.disp_unit,
            s.feat_channels as f64,
            s.hidden as f64,
            s.blocks as f64,
            s.d_max as f64,
            s.iters as f64,
            s.lookup_radius as f64,
            s.temperature,
            s.mu,
            g.blocks as f64,
            g.s_max,
            g.color_amp,
            g.depth_amp,
            g.d_ref,
            self.mode.code() as f64,
        ];
        Tensor::from_vec(1, 1, ARCH_LEN, v).unwrap()
    }

    /// Rounds every weight to the checkpoint precision so that a saved and
    /// reloaded model computes bit-identically to the in-memory one.
    pub fn snap_to_storage(&mut self) {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for n in names {
            if let Some(t) = self.params.get_mut(&n) {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    /// Rebuilds the configuration recorded in `params`.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let arch = params.get(ARCH_KEY).ok_or_else(|| Error::Format(format!("checkpoint lacks `{ARCH_KEY}`")))?;
        if arch.len() != ARCH_LEN {
            return Err(Error::Format(format!("`{ARCH_KEY}` has {} entries, expected {ARCH_LEN}", arch.len())));
        }
        let a = arch.data();
        let u = |i: usize| a[i] as usize;
        let codec = CodecConfig { c_f: u(0), c_y_img: u(1), c_y_disp: u(2), c_z: u(3), c_h: u(4), blocks: u(5), d_ceiling: a[6], disp_unit: a[7] };
        let stereo = StereoConfig {
            feat_channels: u(8),
            hidden: u(9),
            blocks: u(10),
            d_max: u(11),
            iters: u(12),
            lookup_radius: u(13),
            temperature: a[14],
            mu: a[15],
        };
        let gauss = GaussianConfig {
            c_f: codec.c_f,
            blocks: u(16),
            s_max: a[17],
            color_amp: a[18],
            depth_amp: a[19],
            d_ref: a[20],
            disp_unit: codec.disp_unit,
        };
        let mode = CrossViewMode::from_code(a[21] as u8).ok_or_else(|| Error::Format("unknown cross-view mode".into()))?;
        Ok(Model { params, codec, stereo, gauss, mode })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(ParamSet::load(path)?)
    }

    /// Checkpoint digest written into every stream header.
    pub fn hash(&self) -> u8 {
        self.params.short_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_round_trips_through_checkpoint() {
        let mut cfg = RunConfig::toy();
        cfg.mode = CrossViewMode::HardWarp;
        let m = Model::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        cfg.mode = CrossViewMode::Off;
        assert_ne!(Model::init(&cfg).unwrap().hash(), m.hash());
    }
}
