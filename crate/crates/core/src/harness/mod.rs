//! Experiment orchestration: configuration, toy training, GOP-structured
//! evaluation, ablation runs, plot emission and the command-line interface.
//!
//! Every run is fully determined by (config, seed); the manifest written
//! beside the outputs records the config hash so runs can be traced back.

mod cli;
mod csvio;
mod eval;
mod plots;
mod train;

pub use cli::run_cli;
pub use csvio::{parse_csv_column, parse_curve_csv, write_curve_csv};
pub use eval::{evaluate_sequence, run_ablation, AblationRow, EvalOutput, FrameRow};
pub use plots::{emit_plots, fluctuation_plot_svg, rd_plot_svg};
pub use train::{train_toy, TrainReport};

use crate::error::{Error, Result};
use crate::imageio::{SequenceSource, SequenceSpec, SynthKind, SynthSpec};
use crate::numerics::{ConvSpec, Graph, Scalar, Tensor, Var};
use crate::sme::ScaleSearchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Which quality metric drives reports and RD points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Psnr,
    MsSsim,
}

/// Element precision for training and evaluation tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    /// "synthetic" or "raw_yuv420".
    pub kind: String,
    /// Raw input path (raw_yuv420 only).
    pub path: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    /// Synthetic texture seed and coarsest noise cell.
    pub seed: u64,
    pub cell: f64,
    pub motion: SynthKind,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            kind: "synthetic".to_string(),
            path: None,
            width: 64,
            height: 64,
            frames: 96,
            fps: 30.0,
            seed: 7,
            cell: 16.0,
            motion: SynthKind::GlobalShift { dx: -2.0, dy: 0.0 },
        }
    }
}

impl SequenceConfig {
    pub fn to_spec(&self) -> Result<SequenceSpec> {
        let source = match self.kind.as_str() {
            "synthetic" => SequenceSource::Synthetic(SynthSpec {
                kind: self.motion,
                width: self.width,
                height: self.height,
                frames: self.frames,
                seed: self.seed,
                cell: self.cell,
            }),
            "raw_yuv420" => {
                let path = self.path.clone().ok_or_else(|| {
                    Error::arg("raw_yuv420 sequences need a path".to_string())
                })?;
                SequenceSource::RawYuv420 { path }
            }
            other => {
                return Err(Error::arg(format!(
                    "unknown sequence kind {other:?} (synthetic | raw_yuv420)"
                )))
            }
        };
        Ok(SequenceSpec {
            source,
            width: self.width,
            height: self.height,
            frame_count: self.frames,
            fps: self.fps,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub gop: usize,
    pub frame_budget: usize,
    pub metric: MetricMode,
    pub pad_multiple: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            gop: 32,
            frame_budget: 96,
            metric: MetricMode::Psnr,
            pad_multiple: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RateConfig {
    pub lambda: f64,
    pub lambda_max: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            lambda: 2048.0,
            lambda_max: 2048.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SmeSection {
    pub enabled: bool,
    pub tau: f64,
    pub delta: f64,
    pub scales: Vec<f64>,
    pub parallel: bool,
}

impl Default for SmeSection {
    fn default() -> Self {
        let d = ScaleSearchConfig::default();
        SmeSection {
            enabled: true,
            tau: d.tau,
            delta: d.delta,
            scales: d.scales,
            parallel: false,
        }
    }
}

impl SmeSection {
    pub fn to_search_config(&self) -> ScaleSearchConfig {
        ScaleSearchConfig {
            scales: self.scales.clone(),
            delta: self.delta,
            tau: self.tau,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSection {
    pub levels: usize,
    pub iters: usize,
    pub window: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            levels: 3,
            iters: 4,
            window: 7,
        }
    }
}

impl FlowSection {
    pub fn estimator(&self) -> crate::flow::PyramidLk {
        crate::flow::PyramidLk {
            levels: self.levels,
            iters_per_level: self.iters,
            window: self.window,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TsmcSection {
    pub enabled: bool,
    pub channels: [usize; 3],
    pub groups: usize,
    pub kernel: usize,
}

impl Default for TsmcSection {
    fn default() -> Self {
        let d = crate::tsmc::TsmcConfig::default();
        TsmcSection {
            enabled: true,
            channels: d.channels,
            groups: d.groups,
            kernel: d.kernel,
        }
    }
}

impl TsmcSection {
    pub fn to_config(&self) -> crate::tsmc::TsmcConfig {
        crate::tsmc::TsmcConfig {
            channels: self.channels,
            groups: self.groups,
            kernel: self.kernel,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MrqaSection {
    /// Apply quality-aware weights during the joint (finetune) stage.
    pub enabled: bool,
    pub base_weights: Option<[f64; 7]>,
}

impl Default for MrqaSection {
    fn default() -> Self {
        MrqaSection {
            enabled: false,
            base_weights: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Alignment-only pretraining steps.
    pub steps_align: usize,
    /// Joint steps with the reconstruction head (rollout-based).
    pub steps_joint: usize,
    pub lr: f64,
    pub seed: u64,
    /// Consecutive frame pairs drawn from the sequence.
    pub pairs: usize,
    /// Weight of the offset-magnitude rate proxy in the loss.
    pub rproxy_weight: f64,
    /// Frames per joint-stage rollout (1 intra + N-1 predicted).
    pub rollout: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps_align: 300,
            steps_joint: 0,
            lr: 2e-5,
            seed: 7,
            pairs: 4,
            rproxy_weight: 0.0,
            rollout: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub precision: Precision,
    pub dump_recon: bool,
    pub label: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            precision: Precision::F32,
            dump_recon: false,
            label: "run".to_string(),
        }
    }
}

/// Complete experiment description. Every field has a default, so a config
/// file only needs the sections it overrides.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sequence: SequenceConfig,
    pub protocol: ProtocolConfig,
    pub rate: RateConfig,
    pub sme: SmeSection,
    pub flow: FlowSection,
    pub tsmc: TsmcSection,
    pub mrqa: MrqaSection,
    pub train: TrainSection,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::data(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocol.gop == 0 {
            return Err(Error::arg("GOP size must be >= 1".to_string()));
        }
        if self.protocol.frame_budget < 2 {
            return Err(Error::arg("frame budget must be >= 2".to_string()));
        }
        if !(self.rate.lambda > 0.0) || !(self.rate.lambda <= self.rate.lambda_max) {
            return Err(Error::arg(format!(
                "require 0 < lambda <= lambda_max, got {} / {}",
                self.rate.lambda, self.rate.lambda_max
            )));
        }
        self.sequence.to_spec()?.validate()?;
        self.tsmc.to_config().validate()?;
        self.sme.to_search_config().validate()?;
        Ok(())
    }

    /// Stable hash over the fully-defaulted configuration.
    pub fn sha256(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load the configured sequence as RGB frames (BT.709 conversion for YUV
/// sources).
pub(crate) fn load_rgb_frames(cfg: &ExperimentConfig) -> Result<Vec<crate::imageio::Frame>> {
    use crate::imageio::{yuv420_to_rgb_bt709, yuv444_to_rgb_bt709, ColorSpace};
    let spec = cfg.sequence.to_spec()?;
    spec.load_frames()?
        .into_iter()
        .map(|f| match f.color_space {
            ColorSpace::Rgb => Ok(f),
            ColorSpace::Yuv420 => yuv420_to_rgb_bt709(&f),
            ColorSpace::Yuv444 => yuv444_to_rgb_bt709(&f),
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    unix_time: u64,
}

/// Write `manifest.json` beside the run outputs. The timestamp is the only
/// field exempt from byte-level reproducibility.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        tool: "flowalign",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: &cfg.sha256(),
        seed: cfg.train.seed,
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest: {e}")))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Toy reconstruction head: one convolution projecting level-1 contexts
/// back to RGB. Enough structure to define frame-level quality for the
/// weight-scheduling rollouts.
#[derive(Clone, Debug)]
pub struct ReconHead<T: Scalar> {
    pub conv: ConvSpec<T>,
}

impl<T: Scalar> ReconHead<T> {
    pub fn init(channels: usize, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5ec0_11ec);
        let bound = (1.0 / (channels * 9) as f64).sqrt();
        ReconHead {
            conv: ConvSpec {
                in_channels: channels,
                out_channels: 3,
                kernel: (3, 3),
                stride: 1,
                padding: 1,
                weight: Tensor::from_fn(&[3, channels, 3, 3], |_| {
                    T::of(rng.gen_range(-bound..bound))
                }),
                bias: Tensor::zeros(&[3]),
            },
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("recon.weight".to_string(), self.conv.weight.clone()),
            ("recon.bias".to_string(), self.conv.bias.clone()),
        ]
    }

    pub fn from_named(channels: usize, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut head = ReconHead::init(channels, 0);
        let w = entries.iter().find(|(n, _)| n == "recon.weight");
        let b = entries.iter().find(|(n, _)| n == "recon.bias");
        match (w, b) {
            (Some((_, w)), Some((_, b))) => {
                if w.shape() != head.conv.weight.shape() || b.shape() != head.conv.bias.shape() {
                    return Err(Error::data(format!(
                        "reconstruction head shape mismatch: {:?}/{:?} in checkpoint",
                        w.shape(),
                        b.shape()
                    )));
                }
                head.conv.weight = w.clone();
                head.conv.bias = b.clone();
                Ok(head)
            }
            _ => Err(Error::data(
                "checkpoint is missing the reconstruction head".to_string(),
            )),
        }
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> (Var, Var) {
        (
            g.leaf(self.conv.weight.clone(), trainable),
            g.leaf(self.conv.bias.clone(), trainable),
        )
    }
}
