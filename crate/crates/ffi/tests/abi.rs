use std::ffi::{CStr, CString};
use std::ptr;

use scn_gait::model::{extract, ModelConfig, ScnParams};
use scn_gait::tensor::Tensor;
use scn_gait::train::save_checkpoint;
use scn_gait_ffi::*;

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        channels: [2, 3, 4],
        height: 16,
        width: 12,
        ..Default::default()
    };
    cfg.mfa.window = 3;
    cfg
}

fn frames(n: usize, h: usize, w: usize) -> Vec<f64> {
    (0..n * h * w)
        .map(|i| f64::from((i * 7 + i / 13) % 3 == 0))
        .collect()
}

fn last_error() -> String {
    let p = scn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &std::path::Path) -> (ScnStatus, *mut ScnModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    (unsafe { scn_model_load(c.as_ptr(), &mut model) }, model)
}

#[test]
fn loaded_checkpoint_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let params = ScnParams::init(&small_config(), 3).unwrap();
    let path = dir.path().join("ckpt.scn");
    save_checkpoint(&path, 7, &params, None).unwrap();

    let (status, model) = load(&path);
    assert_eq!(status, ScnStatus::Ok);
    let len = unsafe { scn_model_feature_len(model) };
    assert_eq!(len, 4 * 4 * 3);
    let (mut h, mut w) = (0, 0);
    assert_eq!(
        unsafe { scn_model_input_size(model, &mut h, &mut w) },
        ScnStatus::Ok
    );
    assert_eq!((h, w), (16, 12));

    let x = frames(10, h, w);
    let mut out = vec![0.0; len];
    let status = unsafe { scn_model_extract(model, x.as_ptr(), 10, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, ScnStatus::Ok);
    let expected = extract(&params, &Tensor::new(vec![10, h, w], x).unwrap()).unwrap();
    assert_eq!(out, expected.flat());
    unsafe { scn_model_free(model) };
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (status, model) = load(&dir.path().join("missing.scn"));
    assert_ne!(status, ScnStatus::Ok);
    assert!(model.is_null());
    assert!(last_error().contains("missing.scn"));

    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { scn_model_init_default(1, &mut model) },
        ScnStatus::Ok
    );
    let len = unsafe { scn_model_feature_len(model) };
    assert_eq!(len, ModelConfig::default().feature_len());
    let x = frames(2, 64, 44);
    let mut out = vec![0.0; len];
    let status = unsafe { scn_model_extract(model, x.as_ptr(), 2, out.as_mut_ptr(), len) };
    assert_eq!(status, ScnStatus::SequenceTooShort);
    assert!(last_error().contains("too short"));

    let status = unsafe { scn_model_extract(model, ptr::null(), 2, out.as_mut_ptr(), len) };
    assert_eq!(status, ScnStatus::NullPointer);
    assert_eq!(unsafe { scn_model_feature_len(ptr::null()) }, 0);
    unsafe {
        scn_model_free(model);
        scn_model_free(ptr::null_mut());
    }
}

#[test]
fn align_frame_centers_the_silhouette() {
    let (h, w) = (40, 30);
    let pixels: Vec<u8> = (0..h * w)
        .map(|i| {
            if (5..25).contains(&(i / w)) && (3..9).contains(&(i % w)) {
                255
            } else {
                0
            }
        })
        .collect();
    let mut out = vec![0.0; 64 * 44];
    let status =
        unsafe { scn_align_frame(pixels.as_ptr(), h, w, 64, 44, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, ScnStatus::Ok);
    assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    // Every row of the crop is foreground, centered on column 22.
    assert!((0..64).all(|y| out[y * 44 + 22] == 1.0));
    assert!((0..64).all(|y| out[y * 44] == 0.0));

    let blank = vec![0u8; h * w];
    let status =
        unsafe { scn_align_frame(blank.as_ptr(), h, w, 64, 44, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, ScnStatus::DegenerateFrame);
}

#[test]
fn template_counts_and_constant_input() {
    let (n, c, h, w) = (6, 2, 3, 3);
    let constant = vec![0.25; n * c * h * w];
    let mut out = vec![1.0; n * c * h * w];
    let mut m = 0;
    let kinds = [
        (ScnTemplateKind::Diff, n - 1),
        (ScnTemplateKind::MultiDiff, n - 2),
        (ScnTemplateKind::StaticExclMean, n),
        (ScnTemplateKind::StaticExclMedian, n),
    ];
    for (kind, expected) in kinds {
        let status = unsafe {
            scn_template(
                kind,
                constant.as_ptr(),
                n,
                c,
                h,
                w,
                out.as_mut_ptr(),
                out.len(),
                &mut m,
            )
        };
        assert_eq!(status, ScnStatus::Ok);
        assert_eq!(m, expected);
        assert!(out[..m * c * h * w].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn header_declares_the_interface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/scn_gait.h"))
            .unwrap();
    for name in [
        "typedef struct ScnModel ScnModel",
        "SCN_STATUS_OK = 0",
        "scn_model_load",
        "scn_model_init_default",
        "scn_model_free",
        "scn_model_feature_len",
        "scn_model_input_size",
        "scn_model_extract",
        "scn_align_frame",
        "scn_template",
        "scn_last_error",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
