use std::ffi::CStr;
use std::path::Path;
use std::process::Command;
use std::ptr;

use transfer_itr_ffi::*;

fn last_error() -> String {
    let p = titr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Data {
    x: Vec<f64>,
    a: Vec<u8>,
    y: Vec<f64>,
    t: Vec<f64>,
    n: usize,
    m: usize,
}

/// Deterministic two-covariate sample whose best rule treats `x1 > 0.5`.
fn data() -> Data {
    let n = 60;
    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let x1 = (i as f64 * 0.37).sin() + 0.5;
        let x2 = (i as f64 * 0.11).cos();
        let ai = (i % 2) as u8;
        x.extend([x1, x2]);
        a.push(ai);
        y.push(1.0 + x1 + x2 + f64::from(ai) * 2.0 * (x1 - 0.5) + 0.01 * (i as f64 * 1.7).sin());
    }
    let m = 30;
    let t = (0..m)
        .flat_map(|j| [(j as f64 * 0.21).sin() + 0.6, (j as f64 * 0.13).cos()])
        .collect();
    Data { x, a, y, t, n, m }
}

#[test]
fn fit_and_evaluate_round_trip() {
    let d = data();
    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(
            titr_experimental_new(d.x.as_ptr(), d.n, 2, d.a.as_ptr(), d.y.as_ptr(), &mut exp),
            TitrStatus::Ok
        );
        let mut target = ptr::null_mut();
        assert_eq!(
            titr_target_new(d.t.as_ptr(), d.m, 2, &mut target),
            TitrStatus::Ok
        );

        let mut w = ptr::null_mut();
        assert_eq!(
            titr_weights_nonparametric(exp, target, &mut w),
            TitrStatus::Ok
        );
        assert_eq!(titr_weights_len(w), d.n);
        let mut buf = vec![0.0; d.n];
        assert_eq!(titr_weights_copy(w, buf.as_mut_ptr(), d.n), TitrStatus::Ok);
        assert!((buf.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let mut ess = 0.0;
        assert_eq!(titr_weights_ess(w, &mut ess), TitrStatus::Ok);
        assert!(ess > 1.0 && ess <= d.n as f64);

        let mut rule = ptr::null_mut();
        assert_eq!(titr_rule_fit(exp, w, 3, &mut rule), TitrStatus::Ok);
        assert_eq!(titr_rule_len(rule), 3);
        let mut eta = [0.0; 3];
        assert_eq!(titr_rule_eta(rule, eta.as_mut_ptr(), 3), TitrStatus::Ok);
        assert!((eta.iter().fold(0.0_f64, |m, v| m.max(v.abs())) - 1.0).abs() < 1e-12);

        let mut treat = 9;
        assert_eq!(
            titr_rule_predict(rule, [1.4, 0.0].as_ptr(), 2, &mut treat),
            TitrStatus::Ok
        );
        assert_eq!(treat, 1);
        assert_eq!(
            titr_rule_predict(rule, [-0.4, 0.0].as_ptr(), 2, &mut treat),
            TitrStatus::Ok
        );
        assert_eq!(treat, 0);

        let (mut v1, mut v2, mut e) = (0.0, 0.0, 0.0);
        assert_eq!(
            titr_rule_value(rule, exp, w, &mut v1, &mut e),
            TitrStatus::Ok
        );
        assert_eq!(
            titr_rule_value(rule, exp, w, &mut v2, ptr::null_mut()),
            TitrStatus::Ok
        );
        assert_eq!(v1, v2);
        assert!((e - ess).abs() < 1e-12);

        // a hand-built rule round-trips its coefficients
        let mut own = ptr::null_mut();
        assert_eq!(
            titr_rule_new([0.5, -1.0, 2.0].as_ptr(), 3, &mut own),
            TitrStatus::Ok
        );
        let mut back = [0.0; 3];
        assert_eq!(titr_rule_eta(own, back.as_mut_ptr(), 3), TitrStatus::Ok);
        assert_eq!(back, [0.5, -1.0, 2.0]);

        titr_rule_free(own);
        titr_rule_free(rule);
        titr_weights_free(w);
        titr_target_free(target);
        titr_experimental_free(exp);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let d = data();
    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(
            titr_experimental_new(ptr::null(), d.n, 2, d.a.as_ptr(), d.y.as_ptr(), &mut exp),
            TitrStatus::NullPointer
        );
        assert!(exp.is_null());
        assert!(last_error().contains('x'));

        let mut bad_a = d.a.clone();
        bad_a[3] = 2;
        assert_eq!(
            titr_experimental_new(d.x.as_ptr(), d.n, 2, bad_a.as_ptr(), d.y.as_ptr(), &mut exp),
            TitrStatus::Input
        );
        assert!(!last_error().is_empty());

        let mut w = ptr::null_mut();
        assert_eq!(titr_weights_uniform(0, &mut w), TitrStatus::InvalidArgument);

        let mut rule = ptr::null_mut();
        assert_eq!(
            titr_rule_new([f64::NAN].as_ptr(), 1, &mut rule),
            TitrStatus::Input
        );
        assert_eq!(
            titr_rule_new([1.0, 2.0].as_ptr(), 2, &mut rule),
            TitrStatus::Ok
        );
        let mut treat = 0;
        assert_eq!(
            titr_rule_predict(rule, [1.0, 2.0].as_ptr(), 2, &mut treat),
            TitrStatus::Input
        );
        let mut short = [0.0; 1];
        assert_eq!(
            titr_rule_eta(rule, short.as_mut_ptr(), 1),
            TitrStatus::InvalidArgument
        );
        titr_rule_free(rule);

        // target with a different covariate count
        let x = [0.0, 1.0, 0.5];
        let mut exp = ptr::null_mut();
        assert_eq!(
            titr_experimental_new(
                x.as_ptr(),
                3,
                1,
                [0u8, 1, 0].as_ptr(),
                [1.0, 2.0, 1.5].as_ptr(),
                &mut exp
            ),
            TitrStatus::Ok
        );
        let mut target = ptr::null_mut();
        assert_eq!(
            titr_target_new([5.0, 6.0, 7.0, 8.0].as_ptr(), 2, 2, &mut target),
            TitrStatus::Ok
        );
        assert_eq!(
            titr_weights_nonparametric(exp, target, &mut w),
            TitrStatus::Input
        );
        assert!(w.is_null());
        titr_target_free(target);
        titr_experimental_free(exp);

        assert_eq!(titr_weights_len(ptr::null()), 0);
        titr_weights_free(ptr::null_mut());
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/transfer_itr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    assert!(text.contains("TITR_STATUS_OK"));
    assert!(text.contains("titr_rule_fit"));
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ TitrRule *r = 0; return titr_rule_len(r) == 0 ? TITR_STATUS_OK : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status()
        .expect("a C compiler named `cc` is on PATH");
    assert!(status.success());
}
