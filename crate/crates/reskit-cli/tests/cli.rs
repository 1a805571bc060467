//! End-to-end tests of the `reskit` binary: exit codes, determinism,
//! round-trip accuracy, and report-schema conformance.

use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reskit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn reskit")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn synth_config(traces: Vec<Value>, attenuation_db: f64) -> Value {
    json!({
        "traces": traces,
        "shared": { "attenuation_db": attenuation_db, "temperature_k": 0.015 }
    })
}

fn trace_spec(
    q_l: f64,
    q_c: f64,
    f_r0: f64,
    a_n0: Option<f64>,
    noise_sigma: f64,
    power_dbm: f64,
    points: usize,
) -> Value {
    let lw = f_r0 / q_l;
    json!({
        "params": {
            "a": 1.0, "alpha": 0.3, "tau": 3e-8, "phi": 0.1,
            "q_l": q_l, "q_c": q_c, "f_r0": f_r0, "beta": 0.0
        },
        "a_n0": a_n0,
        "grid": { "f_start_hz": f_r0 - 10.0 * lw, "f_stop_hz": f_r0 + 10.0 * lw, "points": points },
        "noise_sigma": noise_sigma,
        "source_power_dbm": power_dbm,
        "sweep_direction": "up"
    })
}

// ---------------------------------------------------------------- schema

/// Validates a JSON instance against the subset of JSON Schema the report
/// schema uses: $ref into #/definitions, type, properties, required, items,
/// and enum.
mod schema {
    use serde_json::Value;

    fn resolve<'a>(schema: &'a Value, root: &'a Value) -> &'a Value {
        if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
            let mut node = root;
            for part in r.trim_start_matches("#/").split('/') {
                node = node.get(part).expect("dangling $ref");
            }
            return node;
        }
        schema
    }

    fn type_matches(name: &str, v: &Value) -> bool {
        match name {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "number" => v.is_number(),
            "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            other => panic!("unknown schema type `{other}`"),
        }
    }

    pub fn validate(schema: &Value, v: &Value, root: &Value, path: &str, errors: &mut Vec<String>) {
        let schema = resolve(schema, root);

        if let Some(t) = schema.get("type") {
            let ok = match t {
                Value::String(name) => type_matches(name, v),
                Value::Array(names) => names
                    .iter()
                    .any(|n| type_matches(n.as_str().expect("type name"), v)),
                _ => panic!("bad type clause"),
            };
            if !ok {
                errors.push(format!("{path}: type mismatch, expected {t}, got {v}"));
                return;
            }
        }

        if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
            if !allowed.contains(v) {
                errors.push(format!("{path}: {v} not in enum {allowed:?}"));
            }
        }

        if let Some(obj) = v.as_object() {
            if let Some(required) = schema.get("required").and_then(Value::as_array) {
                for key in required {
                    let key = key.as_str().expect("required key");
                    if !obj.contains_key(key) {
                        errors.push(format!("{path}: missing required key `{key}`"));
                    }
                }
            }
            if let Some(props) = schema.get("properties").and_then(Value::as_object) {
                for (key, sub) in props {
                    if let Some(child) = obj.get(key) {
                        validate(sub, child, root, &format!("{path}.{key}"), errors);
                    }
                }
            }
        }

        if let Some(items) = v.as_array() {
            if let Some(sub) = schema.get("items") {
                for (i, child) in items.iter().enumerate() {
                    validate(sub, child, root, &format!("{path}[{i}]"), errors);
                }
            }
        }
    }
}

fn assert_schema_valid(instance: &Value) {
    let schema_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schema/report-v1.schema.json");
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let mut errors = Vec::new();
    schema::validate(&schema, instance, &schema, "$", &mut errors);
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

// ---------------------------------------------------------------- synth + fitone

#[test]
fn synth_fitone_roundtrip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (q_l, q_c, f_r0) = (1e5, 2e5, 5e9);
    let config = synth_config(
        vec![trace_spec(q_l, q_c, f_r0, None, 0.0, -100.0, 801)],
        -75.0,
    );
    let config_path = dir.path().join("synth.json");
    write(&config_path, &config.to_string());

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        assert_exit(
            &run(&[
                "synth",
                "--config",
                config_path.to_str().unwrap(),
                "--seed",
                "11",
                "--output",
                out.to_str().unwrap(),
            ]),
            0,
        );
    }
    // same config and seed give identical bytes
    for name in ["trace_000.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    let out = run(&[
        "fitone",
        out_a.join("trace_000.csv").to_str().unwrap(),
        "--power-dbm",
        "-100",
    ]);
    assert_exit(&out, 0);
    let fit = &stdout_json(&out)["fit"];
    let q_i_true = 1.0 / (1.0 / q_l - 0.1f64.cos() / q_c);
    let q_i = fit["q_i"].as_f64().unwrap();
    assert!(
        (q_i - q_i_true).abs() / q_i_true < 0.01,
        "q_i {q_i} vs {q_i_true}"
    );
    assert!(fit["converged"].as_bool().unwrap());
}

// ---------------------------------------------------------------- exit codes

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    // missing file
    assert_exit(&run(&["fitone", "/nonexistent/trace.csv"]), 2);

    // non-monotonic frequency grid, diagnostic carries the line number
    let bad = dir.path().join("bad.csv");
    write(
        &bad,
        "freq_hz,s21_re,s21_im\n1e9,1.0,0.0\n9e8,1.0,0.0\n",
    );
    let out = run(&["fitone", bad.to_str().unwrap()]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":3:"), "no line number in: {stderr}");

    // malformed field
    let malformed = dir.path().join("malformed.csv");
    write(&malformed, "freq_hz,s21_re,s21_im\n1e9,abc,0.0\n");
    assert_exit(&run(&["fitone", malformed.to_str().unwrap()]), 2);

    // empty file
    let empty = dir.path().join("empty.csv");
    write(&empty, "");
    assert_exit(&run(&["fitone", empty.to_str().unwrap()]), 2);

    // header only
    let header_only = dir.path().join("header.csv");
    write(&header_only, "freq_hz,s21_re,s21_im\n");
    assert_exit(&run(&["fitone", header_only.to_str().unwrap()]), 2);

    // zero-point grid in a synth config
    let config = dir.path().join("zero.json");
    write(
        &config,
        &synth_config(vec![trace_spec(1e5, 2e5, 5e9, None, 0.0, -100.0, 0)], -75.0).to_string(),
    );
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--output",
        dir.path().join("z").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn sweep_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    write(&trace, "freq_hz,s21_re,s21_im\n1e9,1.0,0.0\n2e9,1.0,0.0\n");

    // a single power is not a sweep
    let single = dir.path().join("single.json");
    write(
        &single,
        &json!({
            "entries": [{ "trace_path": "t.csv", "source_power_dbm": -90.0, "sweep_direction": "up" }]
        })
        .to_string(),
    );
    assert_exit(&run(&["sweep", single.to_str().unwrap()]), 2);

    // duplicate powers
    let dup = dir.path().join("dup.json");
    write(
        &dup,
        &json!({
            "entries": [
                { "trace_path": "t.csv", "source_power_dbm": -90.0, "sweep_direction": "up" },
                { "trace_path": "t.csv", "source_power_dbm": -90.0, "sweep_direction": "up" }
            ]
        })
        .to_string(),
    );
    assert_exit(&run(&["sweep", dup.to_str().unwrap()]), 2);

    // missing trace file
    let missing = dir.path().join("missing.json");
    write(
        &missing,
        &json!({
            "entries": [
                { "trace_path": "nope.csv", "source_power_dbm": -90.0, "sweep_direction": "up" },
                { "trace_path": "t.csv", "source_power_dbm": -85.0, "sweep_direction": "up" }
            ]
        })
        .to_string(),
    );
    assert_exit(&run(&["sweep", missing.to_str().unwrap()]), 2);
}

// ---------------------------------------------------------------- sweep

/// Self-consistent TLS ladder: Q_i depends on ⟨n⟩ which depends on Q_l, so
/// iterate to the fixed point at each power.
fn tls_ladder_q_l(
    power_dbm: f64,
    atten_db: f64,
    q_tls0: f64,
    n_c: f64,
    alpha_tls: f64,
    q_other: f64,
    q_c: f64,
    f_r0: f64,
    temp_k: f64,
    extra_loss: f64,
) -> f64 {
    let tanh_factor =
        (reskit::phys::PLANCK_H * f_r0 / (2.0 * reskit::phys::BOLTZMANN_KB * temp_k)).tanh();
    let p_g = reskit::phys::dbm_to_watts(power_dbm, atten_db);
    let mut q_i = 1.0 / (tanh_factor / q_tls0 + 1.0 / q_other);
    for _ in 0..60 {
        let q_l = 1.0 / (1.0 / q_i + 1.0 / q_c);
        let n_bar =
            reskit::powersweep::photon_number(q_l, q_c, f_r0, 50.0, 50.0, p_g).unwrap();
        let loss_tls = tanh_factor / (q_tls0 * (1.0 + (n_bar / n_c).powf(alpha_tls)).sqrt());
        q_i = 1.0 / (loss_tls + 1.0 / q_other + extra_loss);
    }
    1.0 / (1.0 / q_i + 1.0 / q_c)
}

#[test]
fn sweep_tls_ladder_budget_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (q_tls0, n_c, alpha_tls, q_other) = (5e5, 0.1, 0.7, 2e6);
    let (f_r0, temp_k, q_c, atten) = (5e9, 0.015, 1e5, -75.0);

    // 12 powers straddling n_c; the top three carry an injected high-power
    // loss tail and enough nonlinearity to land in the nonlinear regime
    let mut traces = Vec::new();
    for k in 0..12 {
        let dbm = -100.0 + 5.0 * k as f64;
        let extra = if k >= 9 { 2e-7 * (k - 8) as f64 } else { 0.0 };
        let q_l = tls_ladder_q_l(
            dbm, atten, q_tls0, n_c, alpha_tls, q_other, q_c, f_r0, temp_k, extra,
        );
        let a_n0 = (k >= 9).then_some(0.2);
        let mut spec = trace_spec(q_l, q_c, f_r0, a_n0, 0.0, dbm, 1201);
        // the synthetic model has phi = 0.1; regenerate q_l so the fitted
        // Q_i matches the ladder: 1/Q_l = 1/Q_i + cos(phi)/Q_c
        let q_i = 1.0 / (1.0 / q_l - 1.0 / q_c);
        spec["params"]["q_l"] = json!(1.0 / (1.0 / q_i + 0.1f64.cos() / q_c));
        traces.push(spec);
    }
    let config_path = dir.path().join("synth.json");
    write(&config_path, &synth_config(traces, atten).to_string());

    let data = dir.path().join("data");
    assert_exit(
        &run(&[
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "21",
            "--output",
            data.to_str().unwrap(),
        ]),
        0,
    );

    let report_dir = dir.path().join("report");
    let manifest = data.join("manifest.json");
    assert_exit(
        &run(&[
            "sweep",
            manifest.to_str().unwrap(),
            "--output",
            report_dir.to_str().unwrap(),
        ]),
        0,
    );
    assert!(report_dir.join("qi_vs_n.csv").is_file());
    assert!(report_dir.join("loss_budget.csv").is_file());

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap())
            .unwrap();
    assert_schema_valid(&report);

    assert!(report["tls"].is_object(), "tls section missing");
    assert!(report["power_law"].is_object(), "power-law section missing");
    let budget = &report["loss_budget"];
    assert!(budget.is_object(), "loss budget missing");

    let d_tls = budget["delta_tls"].as_f64().unwrap();
    let d_other = budget["delta_other"].as_f64().unwrap();
    assert!(
        (d_tls - 1.0 / q_tls0).abs() * q_tls0 < 0.05,
        "delta_tls {d_tls:.3e} vs {:.3e}",
        1.0 / q_tls0
    );
    assert!(
        (d_other - 1.0 / q_other).abs() * q_other < 0.05,
        "delta_other {d_other:.3e} vs {:.3e}",
        1.0 / q_other
    );
    assert!(budget["delta_power"].as_f64().unwrap() >= 0.0);

    // identical inputs give identical report bytes
    let report_dir2 = dir.path().join("report2");
    assert_exit(
        &run(&[
            "sweep",
            manifest.to_str().unwrap(),
            "--output",
            report_dir2.to_str().unwrap(),
        ]),
        0,
    );
    assert_eq!(
        std::fs::read(report_dir.join("report.json")).unwrap(),
        std::fs::read(report_dir2.join("report.json")).unwrap()
    );
}

#[test]
fn sweep_all_linear_ladder_has_no_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let traces = (0..6)
        .map(|k| trace_spec(1e5, 2e5, 5e9, None, 0.0, -120.0 + 5.0 * k as f64, 801))
        .collect();
    let config_path = dir.path().join("synth.json");
    write(&config_path, &synth_config(traces, -75.0).to_string());
    let data = dir.path().join("data");
    assert_exit(
        &run(&[
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--output",
            data.to_str().unwrap(),
        ]),
        0,
    );

    let out = run(&["sweep", data.join("manifest.json").to_str().unwrap()]);
    assert_exit(&out, 0);
    let report = stdout_json(&out);
    assert_schema_valid(&report);
    assert!(report["power_law"].is_null());
    assert!(report["power_law_unavailable_reason"]
        .as_str()
        .unwrap()
        .contains("linear"));
    assert!(report["loss_budget"].is_null());
    assert!(report["tls"].is_object());
}

// ---------------------------------------------------------------- nonlin

fn synth_nonlinear_pair(dir: &Path) -> PathBuf {
    let traces = vec![
        trace_spec(1e5, 2e5, 5e9, Some(0.15), 5e-4, -95.0, 801),
        trace_spec(1e5, 2e5, 5e9, Some(0.3), 5e-4, -92.0, 801),
    ];
    let config_path = dir.join("synth.json");
    write(&config_path, &synth_config(traces, 0.0).to_string());
    let data = dir.join("data");
    assert_exit(
        &run(&[
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "9",
            "--output",
            data.to_str().unwrap(),
        ]),
        0,
    );
    data.join("manifest.json")
}

#[test]
fn nonlin_point_estimates_without_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_nonlinear_pair(dir.path());
    let out = run(&[
        "nonlin",
        manifest.to_str().unwrap(),
        "--iterations",
        "0",
    ]);
    assert_exit(&out, 0);
    let report = stdout_json(&out);
    for trace in report["traces"].as_array().unwrap() {
        let result = &trace["result"];
        assert!(trace["error"].is_null());
        assert!(result["e_star_j"].as_f64().unwrap() > 0.0);
        assert!(result["e_star_ci95_j"].is_null());
        assert!(result["a_n0_ci95"].is_null());
        assert_eq!(result["bootstrap_iterations"].as_u64(), Some(0));
    }
    assert_eq!(report["aggregate"]["method"].as_str(), Some("mean"));
}

#[test]
fn nonlin_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_nonlinear_pair(dir.path());
    let args_for = |jobs: &str| {
        vec![
            "nonlin".to_string(),
            manifest.to_str().unwrap().to_string(),
            "--iterations".to_string(),
            "2000".to_string(),
            "--seed".to_string(),
            "17".to_string(),
            "--jobs".to_string(),
            jobs.to_string(),
        ]
    };
    let one = run(&args_for("1").iter().map(String::as_str).collect::<Vec<_>>());
    let four = run(&args_for("4").iter().map(String::as_str).collect::<Vec<_>>());
    assert_exit(&one, 0);
    assert_exit(&four, 0);
    assert_eq!(one.stdout, four.stdout, "bootstrap depends on worker count");

    let report = stdout_json(&one);
    let a_n0 = report["traces"][0]["result"]["a_n0"].as_f64().unwrap();
    assert!((a_n0 - 0.15).abs() < 0.02, "a_n0 {a_n0} vs 0.15");
    assert_eq!(report["aggregate"]["method"].as_str(), Some("ci_weighted"));
}

// ---------------------------------------------------------------- kinetic

#[test]
fn kinetic_linear_set_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    // 1/alpha = 1 + 0.5 w exactly
    let mut text = String::from("width_um,f_meas_hz,f_design_hz,end_type\n");
    for w in [2.0f64, 4.0, 8.0, 16.0, 32.0] {
        let alpha = 1.0 / (1.0 + 0.5 * w);
        let f_meas = 5e9 * (1.0 - alpha).sqrt();
        for end_type in ["open", "short"] {
            text.push_str(&format!("{w},{f_meas:.6},5e9,{end_type}\n"));
        }
    }
    write(&csv, &text);
    let out = run(&["kinetic", csv.to_str().unwrap()]);
    assert_exit(&out, 0);
    let report = stdout_json(&out);
    for group in ["open", "short"] {
        let fit = &report[group];
        assert!(fit["r_squared"].as_f64().unwrap() >= 0.999999);
        let slope = fit["slope_per_um"].as_f64().unwrap();
        assert!((slope - 0.5).abs() < 1e-4, "slope {slope}");
        let intercept = fit["intercept"].as_f64().unwrap();
        assert!((intercept - 1.0).abs() < 1e-3, "intercept {intercept}");
    }

    let empty = dir.path().join("empty.csv");
    write(&empty, "width_um,f_meas_hz,f_design_hz,end_type\n");
    assert_exit(&run(&["kinetic", empty.to_str().unwrap()]), 2);
}

// ---------------------------------------------------------------- xrd

#[test]
fn xrd_six_peak_lattice_spacings() {
    let dir = tempfile::tempdir().unwrap();
    let ka1 = 0.154060;
    let ka2 = 0.154443;
    // (center 2theta, amplitude, wavelength, expected d to 4 decimals)
    let peaks = [
        (30.1273, 900.0, ka1, 0.2964),
        (33.4045, 1400.0, ka1, 0.2680),
        (61.9634, 300.0, ka1, 0.1496),
        (62.2340, 220.0, ka1, 0.1491),
        (69.3937, 180.0, ka1, 0.1353),
        (69.5885, 95.0, ka2, 0.1353),
    ];

    // nonzero Lorentzian fraction keeps eta off its boundary so every fit
    // can converge cleanly
    let fwhm = 0.08;
    let eta = 0.3;
    let mut csv = String::from("two_theta_deg,counts\n");
    let mut x = 29.0;
    while x <= 71.0 {
        let mut y = 12.0;
        for (c, amp, _, _) in &peaks {
            let u = (x - c) / fwhm;
            let gauss = (-4.0 * 2f64.ln() * u * u).exp();
            let lorentz = 1.0 / (1.0 + 4.0 * u * u);
            y += amp * ((1.0 - eta) * gauss + eta * lorentz);
        }
        csv.push_str(&format!("{x:.4},{y:.8}\n"));
        x += 0.005;
    }
    let diff = dir.path().join("diff.csv");
    write(&diff, &csv);

    let peak_specs: Vec<Value> = peaks
        .iter()
        .enumerate()
        .map(|(i, (c, amp, lambda, _))| {
            json!({
                "label": format!("peak_{i}"),
                "guess": {
                    "amplitude": amp * 0.8,
                    "center_2theta_deg": c + 0.01,
                    "fwhm_deg": 0.1,
                    "eta": 0.2,
                    "r_squared": null
                },
                "window_deg": [c - 0.09, c + 0.09],
                "lambda_nm": lambda
            })
        })
        .collect();
    let config = dir.path().join("xrd.json");
    write(
        &config,
        &json!({ "background": "constant", "peaks": peak_specs }).to_string(),
    );

    let out = run(&[
        "xrd",
        diff.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let report = stdout_json(&out);
    let results = report.as_array().unwrap();
    assert_eq!(results.len(), peaks.len());
    for (r, (_, _, _, d_expect)) in results.iter().zip(&peaks) {
        assert!(r["fit"]["converged"].as_bool().unwrap());
        let d = r["d_hkl_nm"].as_f64().unwrap();
        assert!(
            ((d * 1e4).round() / 1e4 - d_expect).abs() < 5e-5,
            "{}: d {d:.6} vs {d_expect}",
            r["label"]
        );
    }
}
