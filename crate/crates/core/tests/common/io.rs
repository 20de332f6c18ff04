//! COLMAP and checkpoint fixtures.

use std::fs;
use std::path::Path;

use rand::Rng;
use tempfile::TempDir;

use uwsplat::scene_io::{parse_colmap, write_colmap, Checkpoint, SIDECAR_NAME};
use uwsplat::{GaussianCloud, MediumNet, RgbImage};

use super::rng;

pub fn fixture_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/colmap_small")
}

/// Copies the text fixture into a temporary scene directory and adds the
/// images it references.
pub fn colmap_scene() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("sparse/0");
    fs::create_dir_all(&model).unwrap();
    for f in ["cameras.txt", "images.txt", "points3D.txt"] {
        fs::copy(fixture_dir().join("sparse/0").join(f), model.join(f)).unwrap();
    }
    let images = tmp.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for im in parse_colmap(&model).unwrap().images {
        RgbImage::filled(16, 12, [0.25, 0.5, 0.75]).save_png(&images.join(&im.name)).unwrap();
    }
    tmp
}

/// Parse → write → parse gives the same scene, and a second write is
/// byte-identical to the first.
pub fn colmap_parse_is_stable() -> bool {
    let a = parse_colmap(&fixture_dir().join("sparse/0")).unwrap();
    let t1 = TempDir::new().unwrap();
    write_colmap(&a, t1.path()).unwrap();
    let b = parse_colmap(t1.path()).unwrap();
    let t2 = TempDir::new().unwrap();
    write_colmap(&b, t2.path()).unwrap();
    let same_files = ["cameras.txt", "images.txt", "points3D.txt"]
        .iter()
        .all(|f| fs::read(t1.path().join(f)).unwrap() == fs::read(t2.path().join(f)).unwrap());
    a == b && same_files
}

/// A checkpoint with every field populated at storage precision.
pub fn sample_checkpoint(with_medium: bool) -> Checkpoint {
    let mut r = rng(42);
    let mut cloud = GaussianCloud::empty(3);
    for _ in 0..37 {
        let p: [f64; 3] = std::array::from_fn(|_| r.gen_range(-3.0..3.0));
        let q: [f64; 4] = std::array::from_fn(|_| r.gen_range(-1.0..1.0));
        let s: [f64; 3] = std::array::from_fn(|_| r.gen_range(-5.0..0.0));
        let c: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.0..1.0));
        cloud.push(p, q, s, r.gen_range(0.01..0.99), c);
    }
    cloud.sh_coeffs.iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    cloud.normalize_rotations();
    cloud.quantize();
    for i in 0..cloud.len() {
        cloud.grad_accum[i] = r.gen_range(0.0..1e-2);
        cloud.coverage_accum[i] = r.gen_range(0..500) as f64;
        cloud.max_screen_radius[i] = r.gen_range(0.0..40.0);
    }
    let medium = with_medium.then(|| MediumNet::new(4, 7.3));
    Checkpoint { cloud, medium, iteration: 1234, config_hash: "ab12cd".into(), scene_radius: 3.3 }
}

/// Reads the PLY with an independent parser; returns the vertex count and
/// the first vertex's position.
pub fn read_with_ply_rs(path: &Path) -> (usize, [f32; 3], Vec<String>) {
    use ply_rs::ply::Property;
    let mut f = fs::File::open(path).unwrap();
    let parser = ply_rs::parser::Parser::<ply_rs::ply::DefaultElement>::new();
    let ply = parser.read_ply(&mut f).unwrap();
    let names = ply.header.elements["vertex"].properties.keys().cloned().collect();
    let verts = &ply.payload["vertex"];
    let get = |k: &str| match verts[0][k] {
        Property::Float(v) => v,
        ref other => panic!("{k}: unexpected {other:?}"),
    };
    (verts.len(), [get("x"), get("y"), get("z")], names)
}

pub fn sidecar_path(dir: &Path) -> std::path::PathBuf {
    dir.join(SIDECAR_NAME)
}
