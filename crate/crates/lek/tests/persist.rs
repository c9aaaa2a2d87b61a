use std::fs;

use lek::error::LekError;
use lek::persist::{
    load_bundle, load_bundle_kind, load_features, load_frames, load_landmarks, load_mask, load_trajectory, save_bundle, save_features, save_frames,
    save_landmarks, save_mask, save_trajectory, save_trajectory_as, Bundle, Dtype, TRAJ_MAGIC,
};
use lek_core::audio2landmark::AudioFeatureWindow;
use lek_core::face::{procedural_clip, ClipSpec};
use lek_core::generator::LatentCode;
use lek_core::landmarks::{canonical_face, LandmarkSet};
use lek_core::stitching::Mask;
use lek_core::tensor::Tensor;
use proptest::prelude::*;

fn codes(n: usize, seed: u64) -> Vec<LatentCode> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            LatentCode::new(Tensor::from_fn(&[4, 8], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            }))
            .unwrap()
        })
        .collect()
}

#[test]
fn five_latents_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.lektraj");
    let w = codes(5, 1);
    save_trajectory(&p, &w).unwrap();
    let back = load_trajectory(&p).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in w.iter().zip(&back) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], TRAJ_MAGIC);
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
    assert_eq!(header, serde_json::json!({ "frames": 5, "layers": 4, "dim": 8, "dtype": "f64" }));
}

#[test]
fn single_precision_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t32.lektraj");
    let w = vec![LatentCode::new(Tensor::new(&[1, 3], vec![0.5, -1.25, 3.0]).unwrap()).unwrap()];
    save_trajectory_as(&p, &w, Dtype::F32).unwrap();
    assert_eq!(load_trajectory(&p).unwrap(), w);
}

#[test]
fn corrupt_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.lektraj");
    save_trajectory(&p, &codes(3, 2)).unwrap();
    let bytes = fs::read(&p).unwrap();
    for cut in [4, 11, 20, bytes.len() - 1] {
        fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_trajectory(&p), Err(LekError::Format { .. })), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&p, &bad).unwrap();
    assert!(matches!(load_trajectory(&p), Err(LekError::Format { .. })));
    // a header with an extra field is a schema mismatch
    let h = br#"{"frames":1,"layers":1,"dim":1,"dtype":"f64","extra":1}"#;
    let mut odd = TRAJ_MAGIC.to_vec();
    odd.extend_from_slice(&(h.len() as u32).to_le_bytes());
    odd.extend_from_slice(h);
    odd.extend_from_slice(&1.0f64.to_le_bytes());
    fs::write(&p, &odd).unwrap();
    assert!(matches!(load_trajectory(&p), Err(LekError::Format { .. })));
    assert_eq!(load_trajectory(&dir.path().join("missing")).unwrap_err().exit_code(), 1);
}

#[test]
fn landmarks_round_trip_with_schema() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.json");
    let seq = vec![canonical_face(0.02), canonical_face(0.05).translated(0.01, -0.02)];
    save_landmarks(&p, &seq).unwrap();
    let back = load_landmarks(&p).unwrap();
    assert_eq!(back, seq);
    assert_eq!((back[0].len(), back.len()), (68, 2));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(v["n"], 68);
    assert_eq!(v["frames"][1].as_array().unwrap().len(), 68);
    fs::write(&p, r#"{"n": 2, "frames": [[[0.1, 0.2]]]}"#).unwrap();
    assert!(matches!(load_landmarks(&p), Err(LekError::Format { .. })));
}

#[test]
fn bundles_frames_features_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let clip = procedural_clip(&ClipSpec { frames: 3, size: 16, ..Default::default() }, 1).unwrap();
    let fp = dir.path().join("f.lekb");
    save_frames(&fp, &clip.frames).unwrap();
    assert_eq!(load_frames(&fp).unwrap(), clip.frames);
    assert!(matches!(load_bundle_kind(&fp, "generator"), Err(LekError::Format { .. })));

    let windows: Vec<AudioFeatureWindow> = (0..2).map(|i| AudioFeatureWindow::new(Tensor::from_fn(&[4, 14], |k| k as f64 * 0.1 - i as f64), i).unwrap()).collect();
    let ap = dir.path().join("a.lekb");
    save_features(&ap, &windows).unwrap();
    assert_eq!(load_features(&ap).unwrap(), windows);

    let b = Bundle { kind: "custom".into(), meta: serde_json::json!({ "k": [1, 2] }), tensors: vec![("x".into(), Tensor::new(&[2], vec![1.0, f64::MIN_POSITIVE]).unwrap())] };
    let bp = dir.path().join("b.lekb");
    save_bundle(&bp, &b).unwrap();
    assert_eq!(load_bundle(&bp).unwrap(), b);

    let mut m = Mask::zeros(8);
    m.set(2, 3, true);
    m.set(7, 7, true);
    let mp = dir.path().join("m.png");
    save_mask(&mp, &m).unwrap();
    assert_eq!(load_mask(&mp).unwrap(), m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_stored_value_survives(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 6), frames in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lektraj");
        let w: Vec<LatentCode> = (0..frames).map(|i| LatentCode::new(Tensor::new(&[2, 3], values.iter().map(|v| v * (i + 1) as f64).collect()).unwrap()).unwrap()).collect();
        save_trajectory(&p, &w).unwrap();
        let back = load_trajectory(&p).unwrap();
        for (a, b) in w.iter().zip(&back) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn landmark_files_are_lossless(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.json");
        let l = LandmarkSet::new(pts.iter().map(|&(x, y)| [x, y]).collect()).unwrap();
        save_landmarks(&p, &[l.clone(), l.clone()]).unwrap();
        prop_assert_eq!(load_landmarks(&p).unwrap(), vec![l.clone(), l]);
    }
}
