use std::ffi::CString;
use std::ptr;

use wseg::net::{write_checkpoint, HiddenLayer, NetConfig, NetParams};
use wseg_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { wseg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn net_bytes() -> (NetParams, Vec<u8>) {
    let params = NetParams::init(&NetConfig {
        in_channels: 3,
        hidden: vec![HiddenLayer {
            channels: 4,
            kernel: 3,
        }],
        num_labels: 3,
        seed: 5,
    })
    .unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&params, &mut bytes).unwrap();
    (params, bytes)
}

#[test]
fn net_handle_round_trip() {
    let (params, bytes) = net_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut net: *mut WsegNet = ptr::null_mut();
    assert_eq!(unsafe { wseg_net_load(cpath.as_ptr(), &mut net) }, WsegStatus::Ok);
    assert_eq!(unsafe { wseg_net_num_labels(net) }, 3);
    assert_eq!(unsafe { wseg_net_in_channels(net) }, 3);

    let image: Vec<f64> = (0..4 * 5 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut scores = vec![0.0; 4 * 5 * 3];
    let st = unsafe { wseg_net_forward(net, image.as_ptr(), 4, 5, 3, scores.as_mut_ptr()) };
    assert_eq!(st, WsegStatus::Ok);
    let img = wseg::Image::new(4, 5, 3, image).unwrap();
    assert_eq!(scores, params.forward(&img).unwrap().data());
    unsafe { wseg_net_free(net) };
}

#[test]
fn corrupt_checkpoint_reports_data_error() {
    let (_, mut bytes) = net_bytes();
    bytes[0] = b'X';
    let mut net: *mut WsegNet = ptr::null_mut();
    let st = unsafe { wseg_net_from_bytes(bytes.as_ptr(), bytes.len(), &mut net) };
    assert_ne!(st, WsegStatus::Ok);
    assert!(net.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn missing_file_is_io_error() {
    let p = CString::new("/nonexistent/wseg.ckpt").unwrap();
    let mut net: *mut WsegNet = ptr::null_mut();
    assert_eq!(unsafe { wseg_net_load(p.as_ptr(), &mut net) }, WsegStatus::Io);
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0.0;
    let st = unsafe { wseg_quota_threshold(ptr::null(), 3, 0.5, &mut out) };
    assert_eq!(st, WsegStatus::NullPointer);
    assert!(last_error().contains("values"));
    assert_eq!(unsafe { wseg_net_num_labels(ptr::null()) }, 0);
    unsafe { wseg_net_free(ptr::null_mut()) };
}

#[test]
fn quota_threshold_matches_example() {
    let v = [5.0, 1.0, 4.0, 2.0, 3.0];
    let mut out = 0.0;
    assert_eq!(unsafe { wseg_quota_threshold(v.as_ptr(), 5, 0.4, &mut out) }, WsegStatus::Ok);
    assert_eq!(out, 2.0);
    let st = unsafe { wseg_quota_threshold(v.as_ptr(), 5, 1.5, &mut out) };
    assert_eq!(st, WsegStatus::InvalidInput);
}

#[test]
fn pixel_distribution_normalizes() {
    let s = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
    let mut p = [0.0; 6];
    assert_eq!(unsafe { wseg_pixel_distribution(s.as_ptr(), 1, 2, 3, p.as_mut_ptr()) }, WsegStatus::Ok);
    assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn estep_functions_match_library() {
    // 1x2 image, 3 labels
    let s = [0.0, 1.0, 0.5, 2.0, 0.0, 0.0];
    let present = [1u8];
    let mut labels = [9u8; 2];
    let st = unsafe { wseg_em_fixed_estep(s.as_ptr(), 1, 2, 3, present.as_ptr(), 1, 5.0, 3.0, labels.as_mut_ptr()) };
    assert_eq!(st, WsegStatus::Ok);
    // second pixel ties background and label 1 at 5.0; lowest label wins
    assert_eq!(labels, [1, 0]);

    let mut biases = [0.0; 3];
    let st = unsafe {
        wseg_em_adapt_estep(
            s.as_ptr(),
            1,
            2,
            3,
            present.as_ptr(),
            1,
            0.2,
            0.4,
            0,
            labels.as_mut_ptr(),
            biases.as_mut_ptr(),
        )
    };
    assert_eq!(st, WsegStatus::Ok);
    assert!(labels.iter().all(|&l| l != 2));
    assert_eq!(biases[2], f64::NEG_INFINITY);

    let boxes = [WsegBox {
        x0: 1,
        y0: 0,
        x1: 1,
        y1: 0,
        label: 2,
    }];
    let st = unsafe { wseg_bbox_em_fixed_estep(s.as_ptr(), 1, 2, 3, boxes.as_ptr(), 1, 6.0, 3.0, labels.as_mut_ptr()) };
    assert_eq!(st, WsegStatus::Ok);
    assert_eq!(labels, [0, 2]);
}

#[test]
fn bbox_rect_smallest_wins() {
    let boxes = [
        WsegBox {
            x0: 0,
            y0: 0,
            x1: 3,
            y1: 3,
            label: 1,
        },
        WsegBox {
            x0: 1,
            y0: 1,
            x1: 2,
            y1: 2,
            label: 2,
        },
    ];
    let mut out = [0u8; 16];
    assert_eq!(unsafe { wseg_bbox_rect(boxes.as_ptr(), 2, 4, 4, out.as_mut_ptr()) }, WsegStatus::Ok);
    assert_eq!(out[5], 2);
    assert_eq!(out[0], 1);
    let bad = [WsegBox {
        x0: 0,
        y0: 0,
        x1: 9,
        y1: 0,
        label: 1,
    }];
    assert_eq!(
        unsafe { wseg_bbox_rect(bad.as_ptr(), 1, 4, 4, out.as_mut_ptr()) },
        WsegStatus::InvalidInput
    );
}

#[test]
fn crf_with_zero_pairwise_is_argmax() {
    let s = [0.0, 1.0, 3.0, 0.0];
    let img = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let mut p = wseg_crf_default_params();
    p.w_spatial = 0.0;
    p.w_bilateral = 0.0;
    let mut out = [0u8; 2];
    let st = unsafe { wseg_crf_refine(s.as_ptr(), 1, 2, 2, img.as_ptr(), 3, &p, out.as_mut_ptr()) };
    assert_eq!(st, WsegStatus::Ok);
    assert_eq!(out, [1, 0]);
    let st = unsafe { wseg_crf_refine(s.as_ptr(), 1, 2, 2, img.as_ptr(), 3, ptr::null(), out.as_mut_ptr()) };
    assert_eq!(st, WsegStatus::Ok);
}

#[test]
fn mean_iou_and_out_of_range_labels() {
    let gt = [1u8, 1, 1, 1];
    let pred = [1u8, 1, 0, 0];
    let mut m = 0.0;
    assert_eq!(unsafe { wseg_mean_iou(gt.as_ptr(), pred.as_ptr(), 4, 2, &mut m) }, WsegStatus::Ok);
    assert_eq!(m, 0.25);
    let empty = [5u8; 4];
    assert_eq!(
        unsafe { wseg_mean_iou(empty.as_ptr(), empty.as_ptr(), 4, 2, &mut m) },
        WsegStatus::InvalidInput
    );
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wseg.h")).unwrap();
    for f in [
        "wseg_last_error_message",
        "wseg_net_load",
        "wseg_net_from_bytes",
        "wseg_net_free",
        "wseg_net_forward",
        "wseg_pixel_distribution",
        "wseg_quota_threshold",
        "wseg_em_fixed_estep",
        "wseg_em_adapt_estep",
        "wseg_bbox_rect",
        "wseg_bbox_em_fixed_estep",
        "wseg_crf_refine",
        "wseg_mean_iou",
        "typedef struct WsegNet WsegNet",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
