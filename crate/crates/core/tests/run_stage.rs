//! Multi-camera `run` over synthetic transit streams.

use std::fs;
use std::path::Path;

use flowspect::config::{parse_config, PipelineConfig};
use flowspect::dataset::{write_synthetic_corpus, write_synthetic_stream, Blotch, CorpusSpec, Label};
use flowspect::eval::aggregate_cameras;
use flowspect::image::Image;
use flowspect::pipeline::{run_pipeline, ManifestEntry, RunReport, Stage, MANIFEST_FILE, RUN_DIR, RUN_REPORT_FILE};

const DEFECTIVE_CAMERA: u32 = 2;

fn setup(dir: &Path) -> PipelineConfig {
    let corpus = CorpusSpec {
        n_good: 100,
        n_defective: 30,
        ..CorpusSpec::default()
    };
    write_synthetic_corpus(&dir.join("data"), &corpus).unwrap();

    let streams = dir.join("streams");
    for (product, defective) in [("jar0", false), ("jar1", true)] {
        for camera in 0..4u32 {
            let scene = flowspect::dataset::SyntheticSceneSpec {
                defect: (defective && camera == DEFECTIVE_CAMERA).then_some(Blotch {
                    dx: 0.0,
                    dy: 4.0,
                    radius: 6.0,
                    contrast: 0.25,
                }),
                ..corpus.scene
            };
            let seed = 40 + u64::from(camera) * 2 + u64::from(defective);
            write_synthetic_stream(&streams.join(format!("{product}_camera{camera}")), &scene, 45, seed).unwrap();
        }
    }
    fs::write(streams.join("labels.txt"), "jar0 good\njar1 defective\n").unwrap();

    // the corpus only has camera 0; the streams share its scene, so one
    // model serves all four views in cropped mode
    let text = "dataset.root = data\nrun.streams = streams\noutput.dir = out\nseed = 3\ncameras = 4\n\
                input.mode = cropped\nsplit.train = 60\nsplit.val = 40\nsplit.test = 30\n\
                flow.hidden = 32\nflow.meta_epochs = 3\nflow.sub_epochs = 2\n";
    let mut cfg = parse_config(text).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

#[test]
fn four_cameras_one_defective_view() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    for stage in [Stage::Scan, Stage::Train, Stage::Run] {
        run_pipeline(&cfg, stage).unwrap();
    }
    let run_dir = cfg.output_dir.join(RUN_DIR);
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run_dir.join(RUN_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.products.len(), 2);

    for p in &report.products {
        assert_eq!(p.cameras.len(), 4, "{}", p.product);
        let decisions: Vec<Label> = p.cameras.iter().filter_map(|c| c.label).collect();
        assert_eq!(decisions.len(), 4, "every view should trigger once");
        assert_eq!(p.label, Some(aggregate_cameras(&decisions).unwrap()), "{}", p.product);
        for c in &p.cameras {
            assert_eq!(c.triggers.len(), 1, "{}", c.stream);
            assert_eq!(
                c.label.map(|l| l == Label::Defective),
                c.score.map(|s| s >= report.threshold)
            );
        }
    }
    let jar1 = report.products.iter().find(|p| p.product == "jar1").unwrap();
    assert_eq!(jar1.truth, Some(Label::Defective));
    assert_eq!(jar1.label, Some(Label::Defective));
    let flagged = jar1.cameras.iter().find(|c| c.camera == DEFECTIVE_CAMERA).unwrap();
    assert_eq!(flagged.label, Some(Label::Defective));
    let jar0 = report.products.iter().find(|p| p.product == "jar0").unwrap();
    assert_eq!(jar0.label, Some(Label::Good));
    assert!(report.summary.is_some());

    // one annotated frame per non-reference frame, listed in the manifest
    let manifest = fs::read_to_string(run_dir.join(MANIFEST_FILE)).unwrap();
    let entries: Vec<ManifestEntry> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 8 * 45);
    for e in &entries {
        let img = Image::load(&run_dir.join(&e.file)).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(e.label.is_some(), e.bbox.is_some());
    }
    assert!(entries.iter().any(|e| e.label == Some(Label::Defective)));
}

#[test]
fn run_without_model_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let err = run_pipeline(&cfg, Stage::Run).unwrap_err();
    assert!(err.to_string().contains("model file not found"), "{err}");
}
