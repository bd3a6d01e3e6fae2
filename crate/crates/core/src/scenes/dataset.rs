use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene, ppm, render_ground_truth, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::tensor::Array;

/// Every `TARGET_STRIDE`-th frame is a held-out target candidate.
pub const TARGET_STRIDE: usize = 8;

const RADIUS: (f64, f64) = (2.5, 3.5);
const ELEVATION_DEG: (f64, f64) = (10.0, 45.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub frames_per_scene: usize,
    /// Square image sides written for every frame.
    pub resolutions: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_fov")]
    pub fov_y_deg: f64,
    /// Smallest accepted `frames_per_scene`.
    #[serde(default = "default_min_frames")]
    pub min_frames: usize,
}

fn default_fov() -> f64 {
    50.0
}

fn default_min_frames() -> usize {
    TARGET_STRIDE
}

impl DatasetConfig {
    pub fn new(n_scenes: usize, frames_per_scene: usize, resolutions: &[usize], seed: u64) -> Self {
        DatasetConfig {
            n_scenes,
            frames_per_scene,
            resolutions: resolutions.to_vec(),
            seed,
            fov_y_deg: default_fov(),
            min_frames: default_min_frames(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.frames_per_scene < self.min_frames.max(1) {
            return Err(Error::Config(format!(
                "frames_per_scene {} below minimum {}",
                self.frames_per_scene, self.min_frames
            )));
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::Config("resolutions must be a non-empty list of positive sizes".into()));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::Config(format!("fov_y_deg {} out of range", self.fov_y_deg)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: usize,
    pub dir: String,
    pub frames: usize,
    pub target_eligible: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    spec: SceneSpec,
    cameras: Vec<Camera>,
}

/// One scene loaded at a single resolution.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub id: usize,
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub images: Vec<Array<f32>>,
    pub target_eligible: Vec<usize>,
}

impl SceneData {
    /// Frames that are never targets.
    pub fn context_pool(&self) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|i| !self.target_eligible.contains(i))
            .collect()
    }
}

fn scene_dir_name(id: usize) -> String {
    format!("scene_{id:04}")
}

fn frame_name(k: usize, res: usize) -> String {
    format!("frame_{k:03}_{res}.ppm")
}

fn split_for(n: usize) -> Split {
    if n == 1 {
        return Split {
            train: vec![0],
            test: vec![0],
        };
    }
    let n_test = (n / 5).max(1);
    Split {
        train: (0..n - n_test).collect(),
        test: (n - n_test..n).collect(),
    }
}

/// Jittered orbit around the origin: a full turn of azimuth with radius and
/// elevation wandering inside their allowed bands.
pub fn orbit_cameras(n: usize, size: usize, fov_y_deg: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let r0 = rng.gen_range(2.8..3.2);
    let e0 = rng.gen_range(18.0..37.0);
    let a0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let wobble = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n as f64;
    (0..n)
        .map(|k| {
            let az = a0 + step * (k as f64 + rng.gen_range(-0.2..0.2));
            let phase = wobble + az;
            let r = (r0 + 0.2 * phase.sin() + rng.gen_range(-0.05..0.05)).clamp(RADIUS.0, RADIUS.1);
            let el = (e0 + 6.0 * (2.0 * phase).cos() + rng.gen_range(-1.0..1.0))
                .clamp(ELEVATION_DEG.0, ELEVATION_DEG.1)
                .to_radians();
            let eye = Vector3::new(r * el.cos() * az.cos(), r * el.sin(), r * el.cos() * az.sin());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), fov_y_deg, size, size)
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Renders and writes the whole dataset. Output bytes depend only on `cfg`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<SceneDataset> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_res = *cfg.resolutions.iter().max().unwrap();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for id in 0..cfg.n_scenes {
        let spec = generate_scene(master.gen());
        let mut orbit_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let cameras = orbit_cameras(cfg.frames_per_scene, max_res, cfg.fov_y_deg, &mut orbit_rng)?;
        let dir_name = scene_dir_name(id);
        let dir = out_dir.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, cam) in cameras.iter().enumerate() {
            for &res in &cfg.resolutions {
                let img = render_ground_truth(&spec, cam, res, res)?;
                ppm::write(&dir.join(frame_name(k, res)), &img)?;
            }
        }
        write_json(&dir.join("cameras.json"), &CameraFile { spec, cameras })?;
        scenes.push(SceneEntry {
            id,
            dir: dir_name,
            frames: cfg.frames_per_scene,
            target_eligible: (0..cfg.frames_per_scene).step_by(TARGET_STRIDE).collect(),
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        scenes,
        split: split_for(cfg.n_scenes),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(SceneDataset {
        root: out_dir.to_path_buf(),
        manifest,
    })
}

/// A dataset directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl SceneDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        manifest.config.validate()?;
        if manifest.scenes.len() != manifest.config.n_scenes {
            return Err(Error::Format(format!(
                "manifest lists {} scenes but declares {}",
                manifest.scenes.len(),
                manifest.config.n_scenes
            )));
        }
        Ok(SceneDataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.manifest.config.resolutions
    }

    pub fn entry(&self, id: usize) -> Result<&SceneEntry> {
        self.manifest
            .scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Invalid(format!("no scene {id} in dataset ({} scenes)", self.len())))
    }

    pub fn scene_dir(&self, id: usize) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(id)?.dir))
    }

    /// Cameras (intrinsics rescaled to `res`) and images of one scene.
    pub fn load_scene(&self, id: usize, res: usize) -> Result<SceneData> {
        if !self.resolutions().contains(&res) {
            return Err(Error::Config(format!(
                "resolution {res} not in dataset (has {:?})",
                self.resolutions()
            )));
        }
        let entry = self.entry(id)?;
        let dir = self.root.join(&entry.dir);
        let file: CameraFile = read_json(&dir.join("cameras.json"))?;
        if file.cameras.len() != entry.frames {
            return Err(Error::Format(format!(
                "{}: {} cameras, manifest says {}",
                entry.dir,
                file.cameras.len(),
                entry.frames
            )));
        }
        let mut images = Vec::with_capacity(entry.frames);
        for k in 0..entry.frames {
            let path = dir.join(frame_name(k, res));
            let img = ppm::read(&path)?;
            if img.shape() != [3, res, res] {
                return Err(Error::Format(format!(
                    "{}: image is {:?}, manifest resolution is {res}",
                    path.display(),
                    img.shape()
                )));
            }
            images.push(img);
        }
        Ok(SceneData {
            id,
            spec: file.spec,
            cameras: file.cameras.iter().map(|c| c.scaled_to(res, res)).collect(),
            images,
            target_eligible: entry.target_eligible.clone(),
        })
    }
}
