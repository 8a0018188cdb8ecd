//! Writes a synthetic conveyor corpus (and optionally run streams) for trying
//! the pipeline without camera data.
//!
//! cargo run --release --example synthetic_corpus -- data/ --streams data/streams

use std::path::PathBuf;

use clap::Parser;
use flowspect::dataset::{
    write_synthetic_corpus, write_synthetic_stream, Blotch, Clutter, CorpusSpec, ProductShape, SyntheticSceneSpec,
};

#[derive(Debug, Parser)]
struct Args {
    /// Dataset root to create.
    root: PathBuf,
    #[arg(long, default_value_t = 200)]
    good: usize,
    #[arg(long, default_value_t = 50)]
    defective: usize,
    #[arg(long, default_value_t = 1)]
    cameras: u32,
    /// Paint distractors of at most this albedo offset on the belt.
    #[arg(long)]
    clutter: Option<f64>,
    #[arg(long, default_value_t = 12)]
    clutter_count: usize,
    /// Distractor side length range `lo,hi` in pixels.
    #[arg(long, value_parser = parse_size, default_value = "4,14")]
    clutter_size: (usize, usize),
    /// Width of the top row of the cone silhouette.
    #[arg(long, default_value_t = 24)]
    top_width: usize,
    /// Blotch contrast range `lo,hi`.
    #[arg(long, value_parser = parse_range, default_value = "0.15,0.25")]
    contrast: (f64, f64),
    /// Blotch radius range `lo,hi` in pixels.
    #[arg(long, value_parser = parse_range, default_value = "4,6")]
    radius: (f64, f64),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write one transit per camera for two products, the second defective.
    #[arg(long)]
    streams: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(lo)?, p(hi)?))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(lo)?, p(hi)?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let mut spec = CorpusSpec {
        n_good: args.good,
        n_defective: args.defective,
        cameras: args.cameras,
        seed: args.seed,
        contrast: args.contrast,
        radius: args.radius,
        ..CorpusSpec::default()
    };
    if let ProductShape::Trapezoid { top_width, .. } = &mut spec.scene.shape {
        *top_width = args.top_width;
    }
    if let Some(contrast) = args.clutter {
        spec.scene.clutter = Some(Clutter {
            count: args.clutter_count,
            min_size: args.clutter_size.0,
            max_size: args.clutter_size.1,
            contrast,
        });
    }
    let index = write_synthetic_corpus(&args.root, &spec)?;
    println!("wrote {} items under {}", index.len(), args.root.display());

    if let Some(dir) = args.streams {
        let mut labels = String::new();
        for (p, defect) in [("item0", false), ("item1", true)] {
            for camera in 0..args.cameras {
                let scene = SyntheticSceneSpec {
                    defect: (defect && camera == 0).then_some(Blotch {
                        dx: 0.0,
                        dy: 4.0,
                        radius: 6.0,
                        contrast: 0.25,
                    }),
                    ..spec.scene
                };
                let seed = args.seed ^ (u64::from(camera) << 8) ^ u64::from(defect);
                write_synthetic_stream(&dir.join(format!("{p}_camera{camera}")), &scene, 45, seed)?;
            }
            labels.push_str(&format!("{p} {}\n", if defect { "defective" } else { "good" }));
        }
        std::fs::write(dir.join("labels.txt"), labels)?;
        println!("wrote streams under {}", dir.display());
    }
    Ok(())
}
