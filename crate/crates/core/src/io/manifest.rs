//! Line-delimited dataset manifests.
//!
//! One pair per line, whitespace separated:
//!
//! ```text
//! fragment_a fragment_b t00 t01 ... t33 overlap [keypoints_a keypoints_b]
//! ```
//!
//! `t` is the row-major 4x4 transform mapping fragment_b into fragment_a's
//! frame. Relative paths resolve against the manifest's directory. Lines
//! starting with `#` are comments. Paths may not contain whitespace.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ply::read_ply_data;
use crate::error::{Error, Result};
use crate::geometry::{compute_radii, estimate_normals, PointCloud, RadiusMode, RigidTransform, Vec3};
use crate::training::FragmentPair;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub fragment_a: PathBuf,
    pub fragment_b: PathBuf,
    pub transform_gt: RigidTransform,
    pub overlap: f64,
    pub keypoints: Option<(PathBuf, PathBuf)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Config(format!("manifest line {}: {m}", no + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 19 && toks.len() != 21 {
                return Err(err(format!("expected 19 or 21 fields, got {}", toks.len())));
            }
            let nums = toks[2..19]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            let m: [f64; 16] = nums[..16].try_into().unwrap();
            let transform_gt = RigidTransform::from_matrix4(&m).map_err(|e| err(e.to_string()))?;
            let overlap = nums[16];
            if !(0.0..=1.0).contains(&overlap) {
                return Err(err(format!("overlap {overlap} outside [0, 1]")));
            }
            entries.push(ManifestEntry {
                fragment_a: toks[0].into(),
                fragment_b: toks[1].into(),
                transform_gt,
                overlap,
                keypoints: (toks.len() == 21).then(|| (toks[19].into(), toks[20].into())),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Parses and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &root)?;
        for e in &m.entries {
            let mut files = vec![&e.fragment_a, &e.fragment_b];
            if let Some((a, b)) = &e.keypoints {
                files.extend([a, b]);
            }
            for f in files {
                let full = m.resolve(f);
                if !full.is_file() {
                    return Err(Error::format(path, format!("referenced file {} does not exist", full.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# fragment_a fragment_b t00..t33 (row-major, maps b into a) overlap [keypoints_a keypoints_b]\n");
        for e in &self.entries {
            let _ = write!(s, "{} {}", e.fragment_a.display(), e.fragment_b.display());
            for v in e.transform_gt.to_matrix4() {
                let _ = write!(s, " {v:?}");
            }
            let _ = write!(s, " {:?}", e.overlap);
            if let Some((a, b)) = &e.keypoints {
                let _ = write!(s, " {} {}", a.display(), b.display());
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// How fragments are completed with normals and splat radii on load.
#[derive(Clone, Copy, Debug)]
pub struct FragmentOptions {
    pub normal_k: usize,
    pub radius: RadiusMode,
}

impl Default for FragmentOptions {
    fn default() -> Self {
        Self {
            normal_k: 16,
            radius: RadiusMode::default(),
        }
    }
}

/// Reads a PLY and fills in what rendering needs. Missing normals are
/// estimated and oriented towards the recorded sensor origin, or upward
/// (+z) from the centroid when none is recorded.
pub fn load_fragment(path: &Path, opts: &FragmentOptions) -> Result<PointCloud> {
    let data = read_ply_data(path)?;
    prepare_fragment(data.cloud, data.sensor_origin, opts)
}

pub fn prepare_fragment(cloud: PointCloud, sensor_origin: Option<Vec3>, opts: &FragmentOptions) -> Result<PointCloud> {
    let cloud = if cloud.normals().is_some() {
        cloud
    } else {
        let reference = sensor_origin.unwrap_or_else(|| {
            let c = cloud.points().iter().sum::<Vec3>() / cloud.len().max(1) as f64;
            c + Vec3::new(0.0, 0.0, 10.0)
        });
        estimate_normals(&cloud, opts.normal_k, reference)?
    };
    if cloud.radii().is_some() {
        Ok(cloud)
    } else {
        compute_radii(&cloud, opts.radius)
    }
}

pub fn load_pair(manifest: &Manifest, entry: &ManifestEntry, opts: &FragmentOptions) -> Result<FragmentPair> {
    let a = load_fragment(&manifest.resolve(&entry.fragment_a), opts)?;
    let b = load_fragment(&manifest.resolve(&entry.fragment_b), opts)?;
    FragmentPair::new(a, b, entry.transform_gt, entry.overlap)
}
