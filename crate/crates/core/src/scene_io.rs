//! Scene loading (COLMAP sparse text + images + pseudo-depth) and
//! checkpoint persistence (3DGS-style PLY plus an MLP sidecar).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussian::GaussianCloud;
use crate::image::{GrayImage, ImageError, RgbImage};
use crate::medium::MediumNet;
use crate::sh;

pub const PLY_NAME: &str = "point_cloud.ply";
pub const SIDECAR_NAME: &str = "medium.bin";
pub const SIDECAR_MAGIC: &[u8; 8] = b"UWGSMLP1";
const CHECKPOINT_VERSION: &str = "uwsplat-checkpoint 1";
/// Every `TEST_EVERY`-th image (by sorted name) is held out.
pub const TEST_EVERY: usize = 8;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed line {line_no} in {file}: {reason}")]
    MalformedLine { file: String, line_no: usize, reason: String },
    #[error("unsupported camera model {0} (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),
    #[error("points3D.txt contains no points")]
    MissingInitialPoints,
    #[error("image {image} references unknown camera {camera}")]
    UnknownCamera { image: String, camera: u32 },
    #[error("size mismatch for {path}: expected {expected}, got {got}")]
    SizeMismatch { path: PathBuf, expected: String, got: String },
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// `(fx, fy, cx, cy)`.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        match self.model.as_str() {
            "SIMPLE_PINHOLE" => (self.params[0], self.params[0], self.params[1], self.params[2]),
            _ => (self.params[0], self.params[1], self.params[2], self.params[3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// `(w, x, y, z)`, world to camera.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
}

/// The retained fields of a COLMAP sparse text model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColmapScene {
    pub cameras: Vec<ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(path))
}

fn malformed(file: &str, line_no: usize, reason: impl Into<String>) -> SceneError {
    SceneError::MalformedLine { file: file.to_string(), line_no, reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, file: &str, line_no: usize, what: &str) -> Result<T, SceneError> {
    tok.ok_or_else(|| malformed(file, line_no, format!("missing {what}")))?
        .parse()
        .map_err(|_| malformed(file, line_no, format!("bad {what}")))
}

fn parse_cameras(path: &Path) -> Result<Vec<ColmapCamera>, SceneError> {
    let file = "cameras.txt";
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = parse_num(tok.next(), file, line_no, "camera id")?;
        let model = tok.next().ok_or_else(|| malformed(file, line_no, "missing model"))?.to_string();
        let width = parse_num(tok.next(), file, line_no, "width")?;
        let height = parse_num(tok.next(), file, line_no, "height")?;
        let params = tok
            .map(|t| t.parse::<f64>().map_err(|_| malformed(file, line_no, "bad parameter")))
            .collect::<Result<Vec<_>, _>>()?;
        let needed = match model.as_str() {
            "PINHOLE" => 4,
            "SIMPLE_PINHOLE" => 3,
            _ => return Err(SceneError::UnsupportedCameraModel(model)),
        };
        if params.len() != needed {
            return Err(malformed(file, line_no, format!("{model} needs {needed} parameters")));
        }
        out.push(ColmapCamera { id, model, width, height, params });
    }
    Ok(out)
}

fn parse_images(path: &Path) -> Result<Vec<ColmapImage>, SceneError> {
    let file = "images.txt";
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        let line_no = i + 1;
        i += 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = parse_num(tok.next(), file, line_no, "image id")?;
        let mut q = [0.0; 4];
        for v in &mut q {
            *v = parse_num(tok.next(), file, line_no, "quaternion")?;
        }
        let mut t = [0.0; 3];
        for v in &mut t {
            *v = parse_num(tok.next(), file, line_no, "translation")?;
        }
        let camera_id = parse_num(tok.next(), file, line_no, "camera id")?;
        let name = tok.next().ok_or_else(|| malformed(file, line_no, "missing name"))?.to_string();
        out.push(ColmapImage { id, qvec: q, tvec: t, camera_id, name });
        // the following line lists 2D observations; it may be empty
        i += 1;
    }
    Ok(out)
}

fn parse_points(path: &Path) -> Result<Vec<ColmapPoint>, SceneError> {
    let file = "points3D.txt";
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = parse_num(tok.next(), file, line_no, "point id")?;
        let mut xyz = [0.0; 3];
        for v in &mut xyz {
            *v = parse_num(tok.next(), file, line_no, "coordinate")?;
        }
        let mut rgb = [0u8; 3];
        for v in &mut rgb {
            *v = parse_num(tok.next(), file, line_no, "color")?;
        }
        let error = parse_num(tok.next(), file, line_no, "error")?;
        out.push(ColmapPoint { id, xyz, rgb, error });
    }
    Ok(out)
}

/// Parses `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn parse_colmap(dir: &Path) -> Result<ColmapScene, SceneError> {
    Ok(ColmapScene {
        cameras: parse_cameras(&dir.join("cameras.txt"))?,
        images: parse_images(&dir.join("images.txt"))?,
        points: parse_points(&dir.join("points3D.txt"))?,
    })
}

/// Writes the three text files; observations are not retained, so each
/// image's 2D-point line is left empty.
pub fn write_colmap(scene: &ColmapScene, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut cams = String::from("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in &scene.cameras {
        cams += &format!("{} {} {} {}", c.id, c.model, c.width, c.height);
        for p in &c.params {
            cams += &format!(" {p:?}");
        }
        cams.push('\n');
    }
    let mut imgs = String::from(
        "# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for im in &scene.images {
        let [qw, qx, qy, qz] = im.qvec;
        let [tx, ty, tz] = im.tvec;
        imgs += &format!(
            "{} {qw:?} {qx:?} {qy:?} {qz:?} {tx:?} {ty:?} {tz:?} {} {}\n\n",
            im.id, im.camera_id, im.name
        );
    }
    let mut pts = String::from("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n");
    for p in &scene.points {
        let [x, y, z] = p.xyz;
        let [r, g, b] = p.rgb;
        pts += &format!("{} {x:?} {y:?} {z:?} {r} {g} {b} {:?}\n", p.id, p.error);
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    /// Index into [`SceneBundle::cameras`].
    pub camera: usize,
    pub image: RgbImage,
    /// Min-max normalized pseudo-depth.
    pub depth: Option<GrayImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    /// One posed camera per view.
    pub cameras: Vec<Camera>,
    pub views: Vec<View>,
    pub init_points: Vec<([f64; 3], [f64; 3])>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SceneBundle {
    /// Radius of the camera centers around their mean (3DGS "extent"),
    /// scaled by 1.1.
    pub fn scene_radius(&self) -> f64 {
        let centers: Vec<Vector3<f64>> = self.cameras.iter().map(|c| c.center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len().max(1) as f64;
        let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        1.1 * r.max(1e-6)
    }
}

/// Deterministic split: views sorted by name, every eighth held out.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % TEST_EVERY != 0)
}

/// Loads a COLMAP text scene directory: `cameras.txt`, `images.txt`,
/// `points3D.txt`, `images/<name>`, and optional `depths/<stem>.png|.f32`.
/// The model files may also live under `sparse/0/`.
pub fn load_colmap(dir: &Path) -> Result<SceneBundle, SceneError> {
    let model_dir = if dir.join("cameras.txt").exists() || !dir.join("sparse/0").exists() {
        dir.to_path_buf()
    } else {
        dir.join("sparse/0")
    };
    let scene = parse_colmap(&model_dir)?;
    if scene.points.is_empty() {
        return Err(SceneError::MissingInitialPoints);
    }
    let mut images = scene.images.clone();
    images.sort_by(|a, b| a.name.cmp(&b.name));
    let mut cameras = Vec::with_capacity(images.len());
    let mut views = Vec::with_capacity(images.len());
    for im in &images {
        let cam = scene
            .cameras
            .iter()
            .find(|c| c.id == im.camera_id)
            .ok_or_else(|| SceneError::UnknownCamera { image: im.name.clone(), camera: im.camera_id })?;
        let (fx, fy, cx, cy) = cam.intrinsics();
        let [w, x, y, z] = im.qvec;
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        let camera = Camera::new(cam.id, cam.width, cam.height, fx, fy, cx, cy)
            .with_pose(rot, Vector3::from(im.tvec));
        let img_path = dir.join("images").join(&im.name);
        if !img_path.exists() {
            return Err(SceneError::MissingFile(img_path));
        }
        let image = RgbImage::load_png(&img_path)?;
        if image.width != cam.width || image.height != cam.height {
            return Err(SceneError::SizeMismatch {
                path: img_path,
                expected: format!("{}x{}", cam.width, cam.height),
                got: format!("{}x{}", image.width, image.height),
            });
        }
        let stem = Path::new(&im.name).file_stem().unwrap_or_default().to_string_lossy().to_string();
        let mut depth = None;
        for ext in ["png", "f32"] {
            let p = dir.join("depths").join(format!("{stem}.{ext}"));
            if p.exists() {
                depth = Some(load_depth_map(&p, cam.width, cam.height)?);
                break;
            }
        }
        views.push(View { name: im.name.clone(), camera: cameras.len(), image, depth });
        cameras.push(camera);
    }
    let init_points =
        scene.points.iter().map(|p| (p.xyz, p.rgb.map(|c| c as f64 / 255.0))).collect();
    let (train, test) = split_indices(views.len());
    Ok(SceneBundle { cameras, views, init_points, train, test })
}

/// Reads a 16-bit grayscale PNG or a raw little-endian `f32` plane and
/// min-max normalizes it.
pub fn load_depth_map(path: &Path, width: usize, height: usize) -> Result<GrayImage, SceneError> {
    let unreadable = |reason: String| SceneError::UnreadableFile { path: path.to_path_buf(), reason };
    let mismatch = |got: String| SceneError::SizeMismatch {
        path: path.to_path_buf(),
        expected: format!("{width}x{height}"),
        got,
    };
    let raw = if path.extension().is_some_and(|e| e == "f32") {
        let bytes = fs::read(path).map_err(|e| unreadable(e.to_string()))?;
        if bytes.len() != width * height * 4 {
            return Err(mismatch(format!("{} bytes", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        GrayImage::from_data(width, height, data)
    } else {
        let img = ::image::open(path).map_err(|e| unreadable(e.to_string()))?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        if w as usize != width || h as usize != height {
            return Err(mismatch(format!("{w}x{h}")));
        }
        let data = luma.as_raw().iter().map(|&v| v as f64).collect();
        GrayImage::from_data(width, height, data)
    };
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(unreadable("non-finite depth value".into()));
    }
    Ok(raw.min_max_normalized())
}

/// Writes a depth plane as raw little-endian `f32`.
pub fn save_depth_f32(depth: &GrayImage, path: &Path) -> Result<(), SceneError> {
    let bytes: Vec<u8> = depth.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a depth plane, scaled from `[0, max]` to the full 16-bit range.
pub fn save_depth_png16(depth: &GrayImage, path: &Path) -> Result<(), SceneError> {
    let (_, hi) = crate::image::min_max(&depth.data);
    let scale = if hi > 0.0 { 65535.0 / hi } else { 0.0 };
    let px: Vec<u16> = depth.data.iter().map(|&v| (v.max(0.0) * scale).round() as u16).collect();
    let buf = ::image::ImageBuffer::<::image::Luma<u16>, _>::from_raw(
        depth.width as u32,
        depth.height as u32,
        px,
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| {
        SceneError::Image(ImageError::Encode { path: path.display().to_string(), reason: e.to_string() })
    })
}

/// Everything needed to resume or render a trained scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    /// `None` for models trained without a medium.
    pub medium: Option<MediumNet>,
    pub iteration: u64,
    pub config_hash: String,
    pub scene_radius: f64,
}

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (sh::num_basis(sh_degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

const ACCUM_NAMES: [&str; 3] = ["grad_accum", "coverage_accum", "max_radius"];

/// Writes `point_cloud.ply` and `medium.bin` into `dir`. Learnable fields
/// are stored as `f32`; the cloud is expected to be held at that precision
/// (see [`GaussianCloud::quantize`]) for the round trip to be exact.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf, SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ply_path = dir.join(PLY_NAME);
    let cloud = &ckpt.cloud;
    let names = property_names(cloud.sh_degree);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("comment {CHECKPOINT_VERSION}\n");
    header += &format!("comment iteration {}\n", ckpt.iteration);
    header += &format!("comment config_hash {}\n", ckpt.config_hash);
    header += &format!("comment scene_radius {:016x}\n", ckpt.scene_radius.to_bits());
    header += &format!("comment sh_degree {}\n", cloud.sh_degree);
    if let Some(m) = &ckpt.medium {
        header += &format!("comment medium_freqs {}\n", m.num_freqs);
        header += &format!("comment medium_hidden {}\n", m.hidden);
        header += &format!("comment medium_depth_scale {:016x}\n", m.depth_scale.to_bits());
    }
    header += &format!("element vertex {}\n", cloud.len());
    for n in &names {
        header += &format!("property float {n}\n");
    }
    for n in ACCUM_NAMES {
        header += &format!("property double {n}\n");
    }
    header += "end_header\n";

    let nb = cloud.num_basis();
    let mut body = Vec::with_capacity(cloud.len() * (names.len() * 4 + 24));
    let put = |body: &mut Vec<u8>, v: f64| body.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        let mut row: Vec<f64> = cloud.positions[i].to_vec();
        row.extend([0.0; 3]);
        let k = cloud.sh(i);
        row.extend((0..3).map(|c| k[c * nb]));
        for c in 0..3 {
            row.extend((1..nb).map(|b| k[c * nb + b]));
        }
        row.push(cloud.logit_opacities[i]);
        row.extend(cloud.log_scales[i]);
        row.extend(cloud.rotations[i]);
        for v in row {
            put(&mut body, v);
        }
        for v in [cloud.grad_accum[i], cloud.coverage_accum[i], cloud.max_screen_radius[i]] {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let f = fs::File::create(&ply_path).map_err(io_err(&ply_path))?;
    let mut w = BufWriter::new(f);
    w.write_all(header.as_bytes()).map_err(io_err(&ply_path))?;
    w.write_all(&body).map_err(io_err(&ply_path))?;
    w.flush().map_err(io_err(&ply_path))?;

    let sidecar = dir.join(SIDECAR_NAME);
    match &ckpt.medium {
        Some(m) => save_sidecar(m, &sidecar)?,
        None if sidecar.exists() => fs::remove_file(&sidecar).map_err(io_err(&sidecar))?,
        None => {}
    }
    Ok(ply_path)
}

pub fn save_sidecar(net: &MediumNet, path: &Path) -> Result<(), SceneError> {
    let shapes = net.layer_shapes();
    let mut buf = Vec::with_capacity(16 + 8 * shapes.len() + 4 * net.num_params());
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for (r, c) in &shapes {
        buf.extend_from_slice(&(*r as u32).to_le_bytes());
        buf.extend_from_slice(&(*c as u32).to_le_bytes());
    }
    for &p in net.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a sidecar for a net of the given architecture.
pub fn load_sidecar(
    path: &Path,
    num_freqs: usize,
    hidden: usize,
    depth_scale: f64,
) -> Result<MediumNet, SceneError> {
    let bytes = fs::read(path).map_err(|e| SceneError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |m: &str| SceneError::VersionMismatch(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let n_layers = u32_at(8);
    let expected = MediumNet::shapes_for(num_freqs, hidden);
    if n_layers != expected.len() || bytes.len() < 12 + 8 * n_layers {
        return Err(bad("layer count does not match the architecture"));
    }
    let mut total = 0;
    for (l, &(er, ec)) in expected.iter().enumerate() {
        let (r, c) = (u32_at(12 + 8 * l), u32_at(16 + 8 * l));
        if (r, c) != (er, ec) {
            return Err(bad(&format!("layer {l} shape {r}x{c}, expected {er}x{ec}")));
        }
        total += r * c;
    }
    let start = 12 + 8 * n_layers;
    if bytes.len() != start + 4 * total {
        return Err(bad("payload length does not match the declared shapes"));
    }
    let params = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    MediumNet::from_params(num_freqs, hidden, depth_scale, params).map_err(|e| bad(&e.to_string()))
}

struct PlyHeader {
    comments: Vec<String>,
    count: usize,
    props: Vec<(String, bool)>, // (name, is_double)
}

fn read_ply_header(r: &mut impl BufRead, path: &Path) -> Result<PlyHeader, SceneError> {
    let bad = |m: String| SceneError::VersionMismatch(format!("{}: {m}", path.display()));
    let mut line = String::new();
    let mut header = PlyHeader { comments: Vec::new(), count: 0, props: Vec::new() };
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(bad("truncated header".into()));
        }
        let l = line.trim_end();
        if first {
            if l != "ply" {
                return Err(bad("not a PLY file".into()));
            }
            first = false;
            continue;
        }
        if l == "end_header" {
            break;
        }
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("binary_little_endian") {
                    return Err(bad("only binary_little_endian is supported".into()));
                }
            }
            Some("comment") => header.comments.push(tok.collect::<Vec<_>>().join(" ")),
            Some("element") => {
                if tok.next() != Some("vertex") {
                    return Err(bad("unexpected element".into()));
                }
                header.count = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad("bad vertex count".into()))?;
            }
            Some("property") => {
                let ty = tok.next().unwrap_or_default();
                let name = tok.next().unwrap_or_default().to_string();
                let is_double = match ty {
                    "float" => false,
                    "double" => true,
                    _ => return Err(bad(format!("unsupported property type {ty}"))),
                };
                header.props.push((name, is_double));
            }
            _ => return Err(bad(format!("unexpected header line '{l}'"))),
        }
    }
    Ok(header)
}

fn comment_value<'a>(h: &'a PlyHeader, key: &str) -> Option<&'a str> {
    h.comments.iter().find_map(|c| c.strip_prefix(key).map(str::trim))
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, SceneError> {
    let ply_path = dir.join(PLY_NAME);
    if !ply_path.exists() {
        return Err(SceneError::MissingFile(ply_path));
    }
    let f = fs::File::open(&ply_path).map_err(io_err(&ply_path))?;
    let mut r = BufReader::new(f);
    let h = read_ply_header(&mut r, &ply_path)?;
    let bad = |m: &str| SceneError::VersionMismatch(format!("{}: {m}", ply_path.display()));
    if !h.comments.iter().any(|c| c == CHECKPOINT_VERSION) {
        return Err(bad("missing or unknown checkpoint version"));
    }
    let num = |key: &str| -> Result<u64, SceneError> {
        comment_value(&h, key).and_then(|v| v.parse().ok()).ok_or_else(|| bad(key))
    };
    let bits = |key: &str| -> Result<f64, SceneError> {
        comment_value(&h, key)
            .and_then(|v| u64::from_str_radix(v, 16).ok())
            .map(f64::from_bits)
            .ok_or_else(|| bad(key))
    };
    let iteration = num("iteration")?;
    let sh_degree = num("sh_degree")? as usize;
    let scene_radius = bits("scene_radius")?;
    let medium_shape = match comment_value(&h, "medium_freqs") {
        Some(_) => Some((
            num("medium_freqs")? as usize,
            num("medium_hidden")? as usize,
            bits("medium_depth_scale")?,
        )),
        None => None,
    };
    let config_hash = comment_value(&h, "config_hash").unwrap_or_default().to_string();
    if sh_degree > sh::MAX_DEGREE {
        return Err(bad("sh_degree out of range"));
    }
    let mut expected: Vec<(String, bool)> =
        property_names(sh_degree).into_iter().map(|n| (n, false)).collect();
    expected.extend(ACCUM_NAMES.iter().map(|n| (n.to_string(), true)));
    if h.props != expected {
        return Err(bad("property layout does not match"));
    }
    let record = (expected.len() - 3) * 4 + 24;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err(&ply_path))?;
    if body.len() != record * h.count {
        return Err(bad("vertex data length does not match the header"));
    }
    let mut cloud = GaussianCloud::empty(sh_degree);
    let nb = cloud.num_basis();
    for rec in body.chunks_exact(record) {
        let mut off = 0;
        let mut f = || {
            let v = f32::from_le_bytes([rec[off], rec[off + 1], rec[off + 2], rec[off + 3]]) as f64;
            off += 4;
            v
        };
        let pos = [f(), f(), f()];
        for _ in 0..3 {
            f();
        }
        let mut coeffs = vec![0.0; 3 * nb];
        for c in 0..3 {
            coeffs[c * nb] = f();
        }
        for c in 0..3 {
            for b in 1..nb {
                coeffs[c * nb + b] = f();
            }
        }
        let opacity = f();
        let scale = [f(), f(), f()];
        let rot = [f(), f(), f(), f()];
        let dbl = |o: usize| f64::from_le_bytes(rec[o..o + 8].try_into().expect("8 bytes"));
        let base = record - 24;
        cloud.positions.push(pos);
        cloud.rotations.push(rot);
        cloud.log_scales.push(scale);
        cloud.logit_opacities.push(opacity);
        cloud.sh_coeffs.extend_from_slice(&coeffs);
        cloud.grad_accum.push(dbl(base));
        cloud.coverage_accum.push(dbl(base + 8));
        cloud.max_screen_radius.push(dbl(base + 16));
    }
    let medium = match medium_shape {
        Some((freqs, hidden, depth_scale)) => {
            Some(load_sidecar(&dir.join(SIDECAR_NAME), freqs, hidden, depth_scale)?)
        }
        None => None,
    };
    Ok(Checkpoint { cloud, medium, iteration, config_hash, scene_radius })
}
