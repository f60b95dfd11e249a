//! End-to-end runs of the `splatedit` binary on a small synthetic scene.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use serde_json::Value;
use splatedit::anchor::{sample_ring, value_channel};
use splatedit::optimize::init_sphere;
use splatedit::render::render;
use splatedit::scene::{load_scene, save_scene, write_scene, GaussianSplat, Scene, Tag};
use splatedit::Image;
use splatedit_cli::bundle::{self, AnchorRecord};
use splatedit_cli::config::PipelineConfig;

const BASE: &str = r#"
scene = "scene.ply"
prompt = "a teapot"
seed = 7
[bbox]
center = [0.0, 0.0, 0.0]
extents = [1.0, 1.0, 1.0]
[ring]
width = 48
height = 48
[init]
count = 300
[coarse]
iterations = 300
[enhance]
iterations = 40
[lift]
turntable_frames = 6
[compose]
gallery_views = 5
[render]
views = 3
"#;

fn splat(p: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> GaussianSplat {
    GaussianSplat::from_activated(Vector3::from(p), [1.0, 0.0, 0.0, 0.0], Vector3::repeat(scale), opacity, Vector3::from(color))
        .unwrap()
}

/// A floor whose brightness grows along +x and an old object inside the edit box.
fn lit_scene() -> Scene {
    let mut splats = Vec::new();
    for i in 0..14 {
        for j in 0..14 {
            let (x, z) = (-2.6 + 0.4 * i as f64, -2.6 + 0.4 * j as f64);
            let b = 0.15 + 0.7 * (x + 2.6) / 5.2;
            splats.push(splat([x, -0.7, z], 0.25, 0.9, [b, b * 0.9, b * 0.8]));
        }
    }
    for i in 0..8 {
        let a = i as f64 / 8.0 * std::f64::consts::TAU;
        splats.push(splat([0.3 * a.cos(), 0.1 * (i % 3) as f64, 0.3 * a.sin()], 0.15, 0.8, [0.8, 0.2, 0.2]));
    }
    Scene::from_splats(splats, Tag::Background)
}

/// The object a simulated inpainter paints into the anchor view.
fn painted_object() -> Scene {
    let mut splats = Vec::new();
    for i in 0..40 {
        let t = i as f64 / 40.0;
        let (a, y) = (t * 7.0 * std::f64::consts::TAU, -0.3 + 0.6 * t);
        let r = 0.35 * (1.0 - (y / 0.4).powi(2)).max(0.2).sqrt();
        splats.push(splat([r * a.cos(), y, r * a.sin()], 0.09, 0.85, [0.2 + 0.6 * t, 0.7 - 0.4 * t, 0.3]));
    }
    Scene::from_splats(splats, Tag::Object)
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        Self::with_scene(&lit_scene(), extra)
    }

    fn with_scene(scene: &Scene, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        save_scene(scene, &dir.path().join("scene.ply")).unwrap();
        std::fs::write(dir.path().join("config.toml"), format!("{BASE}\n{extra}\n")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], prior: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_splatedit"));
        cmd.args(args).arg("--config").arg(self.config()).env("RUST_LOG", "warn");
        match prior {
            Some(p) => cmd.env("SPLATEDIT_PRIOR", p),
            None => cmd.env_remove("SPLATEDIT_PRIOR"),
        };
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }

    /// Plays the external inpainter: paints `painted_object` over the exported
    /// anchor render and segments it by coverage.
    fn inpaint(&self) {
        let dir = self.path("out/anchor");
        let record: AnchorRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.join(bundle::RECORD)).unwrap()).unwrap();
        let base = Image::load_png(&dir.join(bundle::RENDER), 3).unwrap();
        let obj = render(&painted_object(), &record.camera, Vector3::zeros()).unwrap();
        let (w, h) = (base.width(), base.height());
        let painted = Image::from_fn(w, h, 3, |x, y, c| {
            obj.color.get(x, y, c) + (1.0 - obj.mask.get(x, y, 0)) * base.get(x, y, c)
        });
        let mask = obj.mask.map(|a| if a >= 0.5 { 1.0 } else { 0.0 });
        painted.save_png8(&dir.join(bundle::INPAINTED)).unwrap();
        mask.save_png8(&dir.join(bundle::FOREGROUND_MASK)).unwrap();
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn png_size(path: &Path) -> (usize, usize) {
    let img = Image::load_png(path, 3).unwrap();
    (img.width(), img.height())
}

#[test]
fn avp_writes_one_row_per_view_and_reruns_identically() {
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    let csv = std::fs::read_to_string(fx.path("out/avp.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    for (k, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), k);
        let az: f64 = cols[1].parse().unwrap();
        assert!((az - 3.6 * k as f64).abs() < 1e-9, "row {k}: {az}");
    }
    for f in ["ratio_plot.png", "anchor/render.png", "anchor/depth.png", "anchor/bbox_mask.png", "anchor/anchor.json"] {
        assert!(fx.path("out").join(f).exists(), "{f}");
    }
    let first = read(&fx.path("out/avp.csv"));
    let anchor = read(&fx.path("out/anchor/anchor.json"));
    fx.ok(&["avp"]);
    assert_eq!(read(&fx.path("out/avp.csv")), first);
    assert_eq!(read(&fx.path("out/anchor/anchor.json")), anchor);
}

#[test]
fn avp_anchor_matches_brute_force_scan() {
    // With rotations {0, 180} the contrast is |left share - 0.5| of the unrotated frame.
    let fx = Fixture::new("[avp]\nrotations = [0.0, 180.0]\n");
    fx.ok(&["avp"]);
    let cfg = PipelineConfig::load(&fx.config(), None).unwrap();
    let scene = load_scene(&cfg.scene).unwrap();
    let cams = sample_ring(&cfg.ring_for(cfg.ring.count).unwrap()).unwrap();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (k, cam) in cams.iter().enumerate() {
        let out = render(&scene, cam, Vector3::zeros()).unwrap();
        let v = value_channel(&out.color);
        let (w, h) = (v.width(), v.height());
        let mut acc = [(0.0, 0usize); 2];
        for y in 0..h {
            for x in 0..w {
                if out.mask.get(x, y, 0) >= 0.5 {
                    let side = usize::from(2 * x >= w);
                    acc[side].0 += v.get(x, y, 0);
                    acc[side].1 += 1;
                }
            }
        }
        if acc[0].1 == 0 || acc[1].1 == 0 {
            continue;
        }
        let (l, r) = (acc[0].0 / acc[0].1 as f64, acc[1].0 / acc[1].1 as f64);
        let contrast = if l + r == 0.0 { 0.0 } else { (l / (l + r) - 0.5).abs() };
        if contrast > best.1 {
            best = (k, contrast);
        }
    }
    let record: AnchorRecord = serde_json::from_str(&std::fs::read_to_string(fx.path("out/anchor/anchor.json")).unwrap()).unwrap();
    assert_eq!(record.anchor_index, best.0);
    assert!((record.contrast - best.1).abs() < 1e-12);
    assert!(best.1 > 0.05, "scene should be visibly lit from one side");
}

#[test]
fn bright_side_flag_flips_the_reported_rotation() {
    let fx = Fixture::new("[avp]\nrotations = [0.0, 180.0]\n");
    fx.ok(&["avp", "--bright-side", "right"]);
    let right: AnchorRecord = serde_json::from_str(&std::fs::read_to_string(fx.path("out/anchor/anchor.json")).unwrap()).unwrap();
    fx.ok(&["avp", "--bright-side", "left"]);
    let left: AnchorRecord = serde_json::from_str(&std::fs::read_to_string(fx.path("out/anchor/anchor.json")).unwrap()).unwrap();
    assert_eq!(left.anchor_index, right.anchor_index);
    assert_eq!((left.best_rotation - right.best_rotation).abs(), 180.0);
    assert!(left.ratio >= 0.5 && right.ratio <= 0.5);
}

#[test]
fn full_pipeline_on_toy_scene() {
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    fx.inpaint();

    fx.ok(&["lift"]);
    let lift = fx.json("out/lift_metrics.json");
    let p = lift["anchor_psnr"].as_f64().unwrap();
    eprintln!("lift anchor PSNR {p:.2} dB");
    assert!(p > 30.0, "anchor PSNR {p}");
    assert_eq!(lift["losses"]["history"].as_array().unwrap().len(), 300);
    assert_eq!(png_size(&fx.path("out/turntable.png")), (6 * 48, 48));
    assert!(fx.path("out/coarse_loss.csv").exists());

    fx.ok(&["enhance"]);
    let enh = fx.json("out/enhance_metrics.json");
    assert_eq!(enh["background_unchanged"], Value::Bool(true));
    let (before, after) = (enh["anchor_psnr_before"].as_f64().unwrap(), enh["anchor_psnr_after"].as_f64().unwrap());
    eprintln!("enhance anchor PSNR {before:.2} -> {after:.2} dB");
    assert!(after >= before - 1.0, "PSNR {before} -> {after}");
    let history = enh["losses"]["history"].as_array().unwrap();
    assert_eq!(history.len(), 40);
    for key in ["rgb", "mask", "sds", "lambda_sds"] {
        assert!(history[0].get(key).is_some(), "{key}");
    }
    assert_eq!(png_size(&fx.path("out/comparison.png")), (3 * 48, 48));

    fx.ok(&["compose"]);
    let scene = load_scene(&fx.path("scene.ply")).unwrap();
    let object = load_scene(&fx.path("out/object_enhanced.ply")).unwrap();
    let removed = load_scene(&fx.path("out/removed.ply")).unwrap();
    let edited = load_scene(&fx.path("out/scene_edited.ply")).unwrap();
    assert_eq!(removed.len(), 8);
    assert_eq!(edited.len(), scene.len() - removed.len() + object.len());
    let gallery = std::fs::read_dir(fx.path("out/gallery")).unwrap().count();
    assert_eq!(gallery, 5);
    assert_eq!(fx.json("out/compose_metrics.json")["gallery_views"], 5);

    fx.ok(&["render", "--scene", fx.path("out/scene_edited.ply").to_str().unwrap()]);
    assert_eq!(std::fs::read_dir(fx.path("out/render")).unwrap().count(), 4);
}

#[test]
fn insert_mode_keeps_every_original_splat() {
    let fx = Fixture::new("");
    let text = std::fs::read_to_string(fx.config()).unwrap().replacen("[compose]\n", "[compose]\nmode = \"insert\"\n", 1);
    std::fs::write(fx.config(), text).unwrap();
    let object = painted_object();
    save_scene(&object, &fx.path("object.ply")).unwrap();
    fx.ok(&["compose", "--object", fx.path("object.ply").to_str().unwrap()]);
    let scene = load_scene(&fx.path("scene.ply")).unwrap();
    let edited = load_scene(&fx.path("out/scene_edited.ply")).unwrap();
    assert_eq!(edited.len(), scene.len() + object.len());
    assert_eq!(&edited.splats()[..scene.len()], scene.splats());
    assert_eq!(load_scene(&fx.path("out/removed.ply")).unwrap().len(), 0);
}

#[test]
fn zero_iteration_lift_writes_the_initial_sphere() {
    let fx = Fixture::new("");
    let text = std::fs::read_to_string(fx.config()).unwrap().replacen("iterations = 300", "iterations = 0", 1);
    std::fs::write(fx.config(), text).unwrap();
    fx.ok(&["avp"]);
    fx.inpaint();
    fx.ok(&["lift"]);
    let cfg = PipelineConfig::load(&fx.config(), None).unwrap();
    let expected = init_sphere(300, cfg.bbox.center(), cfg.init_radius(), 7).unwrap();
    let mut bytes = Vec::new();
    write_scene(&expected, &mut bytes).unwrap();
    assert_eq!(read(&fx.path("out/object.ply")), bytes);
}

#[test]
fn single_threaded_lift_is_byte_reproducible() {
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    fx.inpaint();
    let text = std::fs::read_to_string(fx.config()).unwrap().replacen("iterations = 300", "iterations = 60", 1);
    std::fs::write(fx.config(), text).unwrap();
    fx.ok(&["lift", "--threads", "1", "--seed", "11"]);
    let first = read(&fx.path("out/object.ply"));
    let csv = read(&fx.path("out/coarse_loss.csv"));
    std::fs::remove_file(fx.path("out/object.ply")).unwrap();
    fx.ok(&["lift", "--threads", "1", "--seed", "11"]);
    assert_eq!(read(&fx.path("out/object.ply")), first);
    assert_eq!(read(&fx.path("out/coarse_loss.csv")), csv);
    fx.ok(&["lift", "--threads", "1", "--seed", "12"]);
    assert_ne!(read(&fx.path("out/object.ply")), first);
}

#[test]
fn config_errors_exit_1() {
    let fx = Fixture::new("bogus_key = 1");
    assert_eq!(fx.run(&["avp"]).status.code(), Some(1));
    let fx = Fixture::new("");
    std::fs::remove_file(fx.path("scene.ply")).unwrap();
    assert_eq!(fx.run(&["avp"]).status.code(), Some(1));
    let fx = Fixture::new("");
    assert_eq!(fx.run(&["avp", "--bright-side", "up"]).status.code(), Some(1));
    // Lifting before any inpainting has been imported.
    assert_eq!(fx.run(&["lift"]).status.code(), Some(1));
}

#[test]
fn mismatched_inpainting_exits_1() {
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    let dir = fx.path("out/anchor");
    Image::new(32, 32, 3).save_png8(&dir.join(bundle::INPAINTED)).unwrap();
    Image::filled(32, 32, 1, 1.0).save_png8(&dir.join(bundle::FOREGROUND_MASK)).unwrap();
    let out = fx.run(&["lift"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("48x48"));
}

#[test]
fn degenerate_data_exits_2() {
    // Nothing in front of any ring camera.
    let far = Scene::from_splats(vec![splat([0.0, 500.0, 0.0], 0.1, 0.5, [1.0; 3])], Tag::Background);
    let fx = Fixture::with_scene(&far, "");
    assert_eq!(fx.run(&["avp"]).status.code(), Some(2));
    // An empty foreground mask.
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    let dir = fx.path("out/anchor");
    Image::new(48, 48, 3).save_png8(&dir.join(bundle::INPAINTED)).unwrap();
    Image::new(48, 48, 1).save_png8(&dir.join(bundle::FOREGROUND_MASK)).unwrap();
    assert_eq!(fx.run(&["lift"]).status.code(), Some(2));
}

#[test]
fn unreachable_prior_exits_3() {
    let fx = Fixture::new("");
    fx.ok(&["avp"]);
    fx.inpaint();
    // Port 9 on loopback refuses connections.
    let out = fx.run_env(&["lift"], Some("127.0.0.1:9"));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
