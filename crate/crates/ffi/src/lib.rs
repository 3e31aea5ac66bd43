//! C ABI for loading scenes and models, rendering, and feed-forward inference.
//!
//! Every call returns an [`SsStatus`]. On failure the message is kept per
//! thread and can be read with [`ss_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Images cross the boundary
//! as row-major `double` buffers with interleaved channels.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::Vector3;
use semsplat::checkpoint::{load_checkpoint, save_checkpoint};
use semsplat::metrics::segment_feature_map;
use semsplat::model::Model;
use semsplat::render::render;
use semsplat::synth::{decode_scene, encode_scene, LabeledScene};
use semsplat::{
    CameraView, Error, ErrorCategory, GaussianScene, ImageBuf, Quaternion, RelativePose,
};

/// Status codes. Values 1 to 5 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    InvalidInput = 1,
    Config = 2,
    Format = 3,
    Numeric = 4,
    Acceptance = 5,
    NullPointer = 6,
    Panic = 7,
}

impl From<&Error> for SsStatus {
    fn from(e: &Error) -> Self {
        match e.category() {
            ErrorCategory::InvalidInput => SsStatus::InvalidInput,
            ErrorCategory::Config => SsStatus::Config,
            ErrorCategory::Format => SsStatus::Format,
            ErrorCategory::Numeric => SsStatus::Numeric,
            ErrorCategory::Acceptance => SsStatus::Acceptance,
        }
    }
}

/// Pinhole camera. `rotation` is a unit quaternion (w, x, y, z) and together
/// with `translation` maps camera coordinates to world coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl SsCamera {
    fn to_view(self) -> semsplat::Result<CameraView> {
        let [tx, ty, tz] = self.translation;
        let pose = RelativePose::new(
            Quaternion::from_array(self.rotation),
            Vector3::new(tx, ty, tz),
        )?;
        let cam = CameraView {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            pose,
            width: self.width as usize,
            height: self.height as usize,
        };
        cam.validate()?;
        Ok(cam)
    }

    fn from_view(c: &CameraView) -> Self {
        let t = c.pose.translation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: c.pose.rotation.to_array(),
            translation: [t.x, t.y, t.z],
            width: c.width as u32,
            height: c.height as u32,
        }
    }
}

/// A gaussian scene, with its class table when it came from a scene file.
pub enum SsScene {
    Labeled(LabeledScene),
    Plain(GaussianScene),
}

impl SsScene {
    fn scene(&self) -> &GaussianScene {
        match self {
            SsScene::Labeled(l) => &l.scene,
            SsScene::Plain(s) => s,
        }
    }

    fn labeled(&self) -> semsplat::Result<&LabeledScene> {
        match self {
            SsScene::Labeled(l) => Ok(l),
            SsScene::Plain(_) => Err(Error::NotInitialized("scene has no class table".into())),
        }
    }
}

/// A trained feed-forward model.
pub struct SsModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Run `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            SsStatus::from(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::ContractViolation(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Copy `src` into a caller buffer of `len` doubles, which must match exactly.
unsafe fn fill(dst: *mut f64, len: usize, src: &[f64], what: &str) -> Result<(), Failure> {
    if len != src.len() {
        return Err(Error::Dimension(format!(
            "{what} buffer holds {len} values, {} needed",
            src.len()
        ))
        .into());
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_load(path: *const c_char, out: *mut *mut SsScene) -> SsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let labeled = decode_scene(&std::fs::read(&path).map_err(Error::from)?)?;
        *out = Box::into_raw(Box::new(SsScene::Labeled(labeled)));
        Ok(())
    })
}

/// Write a scene loaded from a file back out. Predicted scenes carry no
/// class table and cannot be saved.
///
/// # Safety
/// `scene` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_save(scene: *const SsScene, path: *const c_char) -> SsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let path = path_arg(path, "path")?;
        std::fs::write(path, encode_scene(scene.labeled()?)).map_err(Error::from)?;
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_free(scene: *mut SsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of gaussians; 0 for a null handle.
///
/// # Safety
/// `scene` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_len(scene: *const SsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene().len())
}

/// Semantic feature channels; 0 for a null handle.
///
/// # Safety
/// `scene` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_feature_dim(scene: *const SsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene().feature_dim)
}

/// Read a `.cam` file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ss_camera_load(path: *const c_char, out: *mut SsCamera) -> SsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = SsCamera::from_view(&semsplat::io::read_camera(&path)?);
        Ok(())
    })
}

/// Render `scene` at `camera` over `background` (3 doubles).
///
/// `rgb` receives width·height·3 values. `feature` (width·height·feature_dim),
/// `depth` (width·height) and `labels` (width·height class ids, −1 for
/// background) are optional and skipped when null. Labels need a scene
/// loaded from a file.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ss_render(
    scene: *const SsScene,
    camera: *const SsCamera,
    background: *const f64,
    rgb: *mut f64,
    rgb_len: usize,
    feature: *mut f64,
    feature_len: usize,
    depth: *mut f64,
    depth_len: usize,
    labels: *mut i32,
    labels_len: usize,
) -> SsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let cam = deref(camera, "camera")?.to_view()?;
        if background.is_null() {
            return Err(Failure::Null("background"));
        }
        if rgb.is_null() {
            return Err(Failure::Null("rgb"));
        }
        let bg = [*background, *background.add(1), *background.add(2)];
        let out = render(scene.scene(), &cam, bg)?;
        fill(rgb, rgb_len, &out.rgb.data, "rgb")?;
        if !feature.is_null() {
            fill(feature, feature_len, &out.feature.data, "feature")?;
        }
        if !depth.is_null() {
            fill(depth, depth_len, &out.depth.data, "depth")?;
        }
        if !labels.is_null() {
            let map = segment_feature_map(&out.feature, &scene.labeled()?.table)?;
            if labels_len != map.data.len() {
                return Err(Error::Dimension(format!(
                    "labels buffer holds {labels_len} values, {} needed",
                    map.data.len()
                ))
                .into());
            }
            ptr::copy_nonoverlapping(map.data.as_ptr(), labels, labels_len);
        }
        Ok(())
    })
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = Box::into_raw(Box::new(SsModel {
            model: load_checkpoint(&path)?,
        }));
        Ok(())
    })
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ss_model_save(model: *const SsModel, path: *const c_char) -> SsStatus {
    guard(|| {
        let model = deref(model, "model")?;
        save_checkpoint(&path_arg(path, "path")?, &model.model)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image size the model was built for.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ss_model_image_size(
    model: *const SsModel,
    width: *mut u32,
    height: *mut u32,
) -> SsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if width.is_null() || height.is_null() {
            return Err(Failure::Null("width/height"));
        }
        *width = m.model.config.width as u32;
        *height = m.model.config.height as u32;
        Ok(())
    })
}

/// Reconstruct gaussians from two RGB views of width·height·3 values each.
/// The scene lives in the first camera's frame. `pose` (7 doubles, may be
/// null) receives the second camera's pose as w, x, y, z, tx, ty, tz.
///
/// # Safety
/// Image pointers must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ss_model_infer(
    model: *const SsModel,
    image0: *const f64,
    image1: *const f64,
    len: usize,
    out: *mut *mut SsScene,
    pose: *mut f64,
) -> SsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if image0.is_null() || image1.is_null() {
            return Err(Failure::Null("image"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (w, h) = (m.model.config.width, m.model.config.height);
        let image = |p: *const f64| {
            ImageBuf::from_vec(w, h, 3, std::slice::from_raw_parts(p, len).to_vec())
        };
        let (a, b) = (image(image0)?, image(image1)?);
        let (pred, _) = m.model.infer(&a, &b)?;
        if !pose.is_null() {
            let q = pred.pose.rotation.to_array();
            let t = pred.pose.translation;
            let v = [q[0], q[1], q[2], q[3], t.x, t.y, t.z];
            ptr::copy_nonoverlapping(v.as_ptr(), pose, 7);
        }
        *out = Box::into_raw(Box::new(SsScene::Plain(pred.scene)));
        Ok(())
    })
}
