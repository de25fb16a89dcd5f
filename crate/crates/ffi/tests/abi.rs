use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use forknet::model::{save_checkpoint, ForkNet, ForkNetConfig};
use forknet::scene::{generate_scene, render_depth, SceneConfig};
use forknet::voxel::{write_depth, GridSpec};
use forknet_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        forknet_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn tiny() -> ForkNetConfig {
    ForkNetConfig {
        grid: [16, 16, 16],
        classes: 4,
        encoder_widths: [2; 4],
        latent_channels: 2,
        generator_widths: [2; 3],
        discriminator_widths: [2; 3],
        ..ForkNetConfig::default()
    }
}

fn saved_model(dir: &Path) -> *mut ForknetModel {
    let path = dir.join("m.fnck");
    save_checkpoint(&path, &ForkNet::<f32>::new(tiny(), 1).unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { forknet_model_load(cstr(&path).as_ptr(), &mut model) }, ForknetStatus::Ok);
    assert!(!model.is_null());
    model
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(forknet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn failures_set_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.fnck").unwrap();
    assert_eq!(unsafe { forknet_model_load(missing.as_ptr(), &mut model) }, ForknetStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.fnck"));
    assert_eq!(unsafe { forknet_model_load(ptr::null(), &mut model) }, ForknetStatus::NullPointer);
    assert_eq!(unsafe { forknet_model_load(missing.as_ptr(), ptr::null_mut()) }, ForknetStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.fnck");
    std::fs::write(&junk, b"nope").unwrap();
    assert_eq!(unsafe { forknet_model_load(cstr(&junk).as_ptr(), &mut model) }, ForknetStatus::Format);

    let need = unsafe { forknet_last_error(ptr::null_mut(), 0) };
    assert_eq!(need, last_error().len());
    unsafe {
        forknet_model_free(ptr::null_mut());
        forknet_volume_free(ptr::null_mut());
    }
}

#[test]
fn complete_sdf_and_inspect_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let model = saved_model(dir.path());
    let (mut dims, mut classes) = ([0usize; 3], 0usize);
    assert_eq!(unsafe { forknet_model_layout(model, dims.as_mut_ptr(), &mut classes) }, ForknetStatus::Ok);
    assert_eq!((dims, classes), ([16, 16, 16], 4));

    let vs = 0.15f32;
    let values = vec![4.0 * vs; 16 * 16 * 16];
    let (mut x, mut g, mut s) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let st = unsafe { forknet_model_complete_sdf(model, values.as_ptr(), values.len(), vs, &mut x, &mut g, &mut s) };
    assert_eq!(st, ForknetStatus::Ok);

    let mut shape = [0usize; 4];
    for (v, c) in [(x, 1), (g, 2), (s, 5)] {
        assert_eq!(unsafe { forknet_volume_shape(v, shape.as_mut_ptr()) }, ForknetStatus::Ok);
        assert_eq!(shape, [c, 16, 16, 16]);
    }
    let mut buf = vec![0f32; 5 * 4096];
    assert_eq!(unsafe { forknet_volume_copy(s, buf.as_mut_ptr(), buf.len()) }, ForknetStatus::Ok);
    assert!(buf.iter().all(|p| *p > 0.0 && *p < 1.0));
    assert_eq!(unsafe { forknet_volume_copy(s, buf.as_mut_ptr(), 7) }, ForknetStatus::InvalidArgument);
    let mut labels = vec![0u8; 4096];
    assert_eq!(unsafe { forknet_volume_labels(s, labels.as_mut_ptr(), labels.len()) }, ForknetStatus::Ok);
    assert!(labels.iter().all(|&l| l <= 4));

    let file = dir.path().join("s.fvox");
    assert_eq!(unsafe { forknet_volume_write(s, cstr(&file).as_ptr()) }, ForknetStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { forknet_volume_read(cstr(&file).as_ptr(), &mut back) }, ForknetStatus::Ok);
    let mut again = vec![0f32; 5 * 4096];
    assert_eq!(unsafe { forknet_volume_copy(back, again.as_mut_ptr(), again.len()) }, ForknetStatus::Ok);
    assert_eq!(again, buf);

    let short = vec![0.0f32; 10];
    let st = unsafe { forknet_model_complete_sdf(model, short.as_ptr(), short.len(), vs, &mut x, &mut g, &mut s) };
    assert_eq!(st, ForknetStatus::Shape);

    unsafe {
        for v in [x, g, s, back] {
            forknet_volume_free(v);
        }
        forknet_model_free(model);
    }
}

#[test]
fn complete_depth_image() {
    let dir = tempfile::tempdir().unwrap();
    let model = saved_model(dir.path());
    let cfg = SceneConfig::for_grid(GridSpec::new([16, 16, 16], 0.15, [0.0; 3]), 4);
    let depth = render_depth(&generate_scene(5, &cfg).unwrap());
    let path = dir.path().join("d.pgm");
    write_depth(&path, &depth).unwrap();
    let (mut x, mut g, mut s) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let st = unsafe { forknet_model_complete_depth(model, cstr(&path).as_ptr(), 0.15, &mut x, &mut g, &mut s) };
    assert_eq!(st, ForknetStatus::Ok, "{}", last_error());
    let mut len = [0usize; 4];
    unsafe { forknet_volume_shape(x, len.as_mut_ptr()) };
    let mut vals = vec![0f32; 4096];
    assert_eq!(unsafe { forknet_volume_copy(x, vals.as_mut_ptr(), vals.len()) }, ForknetStatus::Ok);
    assert!(vals.iter().all(|v| v.abs() <= 0.6 + 1e-6));
    let st = unsafe { forknet_model_complete_depth(model, cstr(&path).as_ptr(), -1.0, &mut x, &mut g, &mut s) };
    assert_eq!(st, ForknetStatus::InvalidArgument);
    unsafe {
        for v in [x, g, s] {
            forknet_volume_free(v);
        }
        forknet_model_free(model);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"forknet.h\"\nint main(void) { ForknetModel *m = 0; return forknet_model_load(\"x\", &m) == FORKNET_STATUS_OK; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let Ok(out) = Command::new(compiler)
            .args(&extra)
            .arg("-fsyntax-only")
            .arg("-Wall")
            .arg("-Werror")
            .arg("-I")
            .arg(&header)
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} unavailable; skipped");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
