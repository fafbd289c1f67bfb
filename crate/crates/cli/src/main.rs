use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mvdesc::evaluation::{
    evaluate_pair, mutual_nn_matches, pca_colorize, recall, sample_keypoints, write_report, DEFAULT_KEYPOINTS, TAU1,
    TAU2_STRICT,
};
use mvdesc::geometry::{PointCloud, SpatialIndex, Vec3};
use mvdesc::io::{
    gen_synthetic, load_fragment, load_pair, read_keypoints, read_ply, write_keypoints, write_ply, DescriptorFile,
    FragmentOptions, Manifest, PlyFormat, PlyWriteOptions, SyntheticConfig,
};
use mvdesc::render::render_keypoint;
use mvdesc::training::{epoch_means, train, write_history, TrainConfig};
use mvdesc::Model;

/// Multi-view local descriptors for point cloud registration.
#[derive(Parser)]
#[command(name = "mvdesc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of fragment pairs and its manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 5000)]
        points: usize,
        /// Gaussian position noise in meters.
        #[arg(long, default_value_t = 0.002)]
        noise: f64,
        /// Fraction of points dropped at random.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
    },
    /// Train a model on the pairs of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        loss_csv: PathBuf,
    },
    /// Compute descriptors for keypoints of one fragment.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fragment: PathBuf,
        /// Keypoint index list; sampled at random when absent.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_KEYPOINTS)]
        num_keypoints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the keypoint indices used.
        #[arg(long)]
        keypoints_out: Option<PathBuf>,
    },
    /// Mutual nearest-neighbour matches between two descriptor files.
    Match {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inlier fraction and recall over a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<fragment stem>.mvdf` for every fragment.
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long, default_value_t = TAU1)]
        tau1: f64,
        #[arg(long, default_value_t = TAU2_STRICT)]
        tau2: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Color keypoints by the top principal components of their descriptors.
    Colorize {
        #[arg(long)]
        fragment: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Binary)]
        format: Format,
    },
    /// Dump the view patches of one keypoint as PGM images.
    RenderDebug {
        #[arg(long)]
        fragment: PathBuf,
        #[arg(long)]
        keypoint: usize,
        /// Viewpoints and render settings come from here; defaults otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

/// `MVDESC_THREADS` caps the worker pool; 0 or unset means one per core.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MVDESC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("MVDESC_THREADS must be a non-negative integer, got {v:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic {
            out,
            seed,
            pairs,
            points,
            noise,
            dropout,
        } => {
            let cfg = SyntheticConfig {
                n_pairs: pairs,
                points_per_fragment: points,
                noise_sigma: noise,
                dropout,
                ..SyntheticConfig::default()
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let m = gen_synthetic(&out, &cfg, seed)?;
            for e in &m.entries {
                println!("{} {} overlap {:.3}", e.fragment_a.display(), e.fragment_b.display(), e.overlap);
            }
            println!("wrote {}", out.join("manifest.txt").display());
        }
        Command::Train {
            manifest,
            config,
            overrides,
            seed,
            out,
            loss_csv,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let m = Manifest::load(&manifest)?;
            let opts = FragmentOptions::default();
            let data = m
                .entries
                .iter()
                .map(|e| load_pair(&m, e, &opts))
                .collect::<mvdesc::Result<Vec<_>>>()?;
            let outcome = train(&data, &cfg, |r| {
                eprintln!("epoch {} batch {} bh {:.4} ov {:.4} total {:.4}", r.epoch, r.batch, r.bh, r.ov, r.total)
            })?;
            outcome.model.save(&out)?;
            let file = File::create(&loss_csv).with_context(|| format!("creating {}", loss_csv.display()))?;
            write_history(BufWriter::new(file), &outcome.history)?;
            for (e, mean) in epoch_means(&outcome.history).iter().enumerate() {
                println!("epoch {e} mean loss {mean:.6}");
            }
        }
        Command::Extract {
            checkpoint,
            fragment,
            keypoints,
            num_keypoints,
            seed,
            out,
            keypoints_out,
        } => {
            let model = Model::load(&checkpoint)?;
            let cloud = load_fragment(&fragment, &FragmentOptions::default())?;
            let kps = match &keypoints {
                Some(p) => read_keypoints(p)?,
                None => sample_keypoints(cloud.len(), num_keypoints, seed),
            };
            if let Some(&bad) = kps.iter().find(|&&k| k >= cloud.len()) {
                bail!("keypoint {bad} out of range for {} points", cloud.len());
            }
            let index = SpatialIndex::build(cloud.points());
            let descs = model.describe_keypoints(&cloud, &index, &kps)?;
            DescriptorFile::new(descs, kps.clone())?.save(&out)?;
            if let Some(p) = keypoints_out {
                write_keypoints(&p, &kps)?;
            }
            println!("{} descriptors of dimension {}", kps.len(), model.config.descriptor_dim);
        }
        Command::Match { a, b, out } => {
            let (fa, fb) = (DescriptorFile::load(&a)?, DescriptorFile::load(&b)?);
            let matches = mutual_nn_matches(&fa.descriptors, &fb.descriptors)?;
            let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            writeln!(w, "row_a,row_b,keypoint_a,keypoint_b")?;
            for &(i, j) in &matches {
                writeln!(w, "{i},{j},{},{}", fa.keypoints[i], fb.keypoints[j])?;
            }
            w.flush()?;
            println!("{} mutual matches", matches.len());
        }
        Command::Evaluate {
            manifest,
            descriptors,
            tau1,
            tau2,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let mut reports = Vec::with_capacity(m.entries.len());
            for (k, e) in m.entries.iter().enumerate() {
                let (da, ka) = keypoint_descriptors(&m, &e.fragment_a, &descriptors)?;
                let (db, kb) = keypoint_descriptors(&m, &e.fragment_b, &descriptors)?;
                let id = format!("{k}");
                reports.push(evaluate_pair(&id, &da.descriptors, &db.descriptors, &ka, &kb, &e.transform_gt, tau1, tau2)?);
            }
            match &out {
                Some(p) => {
                    let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                    write_report(BufWriter::new(f), &reports, tau2)?;
                }
                None => write_report(std::io::stdout().lock(), &reports, tau2)?,
            }
            let fr: Vec<f64> = reports.iter().map(|r| r.inlier_fraction).collect();
            println!("recall {:.4}", recall(&fr, tau2));
        }
        Command::Colorize {
            fragment,
            descriptors,
            out,
            format,
        } => {
            let cloud = read_ply(&fragment)?;
            let f = DescriptorFile::load(&descriptors)?;
            check_keypoints(&f.keypoints, cloud.len(), &descriptors)?;
            let colors = pca_colorize(&f.descriptors)?;
            let format = match format {
                Format::Ascii => PlyFormat::Ascii,
                Format::Binary => PlyFormat::BinaryLittleEndian,
            };
            let opts = PlyWriteOptions {
                colors: Some(&colors),
                sensor_origin: None,
            };
            write_ply(&out, &cloud.select(&f.keypoints), format, opts)?;
            println!("colored {} keypoints", f.len());
        }
        Command::RenderDebug {
            fragment,
            keypoint,
            checkpoint,
            seed,
            out,
        } => {
            let model = match &checkpoint {
                Some(p) => Model::load(p)?,
                None => Model::new(Default::default(), seed)?,
            };
            let cloud = load_fragment(&fragment, &FragmentOptions::default())?;
            let index = SpatialIndex::build(cloud.points());
            let patches = render_keypoint(&cloud, &index, keypoint, &model.viewpoints(), &model.config.render)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for p in &patches {
                let path = out.join(format!("view{}_rot{}.pgm", p.view_index, p.rotation_index));
                let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                p.write_pgm(&mut w)?;
                w.flush()?;
            }
            println!("wrote {} patches to {}", patches.len(), out.display());
        }
    }
    Ok(())
}

fn check_keypoints(kps: &[usize], n: usize, origin: &Path) -> Result<()> {
    if let Some(&bad) = kps.iter().find(|&&k| k >= n) {
        bail!("{}: keypoint {bad} out of range for {n} points", origin.display());
    }
    Ok(())
}

/// Descriptor file of a fragment plus the positions of its keypoints.
fn keypoint_descriptors(m: &Manifest, fragment: &Path, dir: &Path) -> Result<(DescriptorFile, Vec<Vec3>)> {
    let stem = fragment
        .file_stem()
        .with_context(|| format!("fragment path {} has no file name", fragment.display()))?;
    let path = dir.join(stem).with_extension("mvdf");
    let f = DescriptorFile::load(&path)?;
    let cloud: PointCloud = read_ply(&m.resolve(fragment))?;
    check_keypoints(&f.keypoints, cloud.len(), &path)?;
    let pts = f.keypoints.iter().map(|&k| cloud.point(k)).collect();
    Ok((f, pts))
}
