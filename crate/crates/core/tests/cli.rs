use std::path::PathBuf;
use std::process::{Command, Output};

fn bismut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bismut"))
        .args(args)
        .env_remove("NEUMANN_BISMUT_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bismut-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn oracle_row_layout() {
    let o = bismut(&["oracle", "--model", "half_line", "--f", "sq", "--x0", "0.5", "--T", "1", "--formula", "grad13"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "#schema=1");
    assert_eq!(lines[1], "command,model,f,formula,x0,v,T,dt,N,schedule,seed,value,se,n_used,rejected,wall_s");
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields.len(), 16);
    assert_eq!(fields[0], "oracle");
    assert!((fields[11].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn reproducible_estimate_is_identical_across_thread_counts() {
    let run = |threads: &str| {
        let o = bismut(&[
            "--threads", threads, "estimate", "--model", "hemisphere", "--f", "costheta", "--x0", "0.2,0.1", "--T", "0.3", "--N", "400",
            "--formula", "grad14", "--seed", "5", "--reproducible",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let a = run("1");
    assert_eq!(a, run("3"));
    assert!(a.trim_end().ends_with(",NA"));
}

#[test]
fn json_output_to_file() {
    let path = scratch("est.json");
    let o = bismut(&["estimate", "--N", "200", "--format", "json", "--output", path.to_str().unwrap(), "--reproducible"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["model"], "half_line");
    assert_eq!(v["n_used"], 200);
}

#[test]
fn config_file_and_flag_override() {
    let cfg = scratch("run.cfg");
    std::fs::write(&cfg, "# half-line gradient\nmodel = half_line\nx0 = 0.5\nformula = grad13\nN = 100\n").unwrap();
    let o = bismut(&["oracle", "--config", cfg.to_str().unwrap(), "--x0", "1.5"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[4], "1.5");
    assert!((row[11].parse::<f64>().unwrap() - 3.0).abs() < 1e-6);
}

#[test]
fn configuration_errors_exit_with_one() {
    let cfg = scratch("bad.cfg");
    std::fs::write(&cfg, "model = half_line\nwobble = 3\n").unwrap();
    let o = bismut(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(bismut(&["estimate", "--model", "torus"]).status.code(), Some(1));
    assert_eq!(bismut(&["estimate", "--f", "costheta"]).status.code(), Some(1));
    assert_eq!(bismut(&["estimate", "--formula", "hess", "--schedule", "ramp"]).status.code(), Some(1));
    assert_eq!(bismut(&["estimate", "--model", "hemisphere", "--ou-k", "1", "--x0", "0,0"]).status.code(), Some(1));
}

#[test]
fn path_trace_header() {
    let path = scratch("paths.bin");
    let o = bismut(&["estimate", "--model", "half_space_2d", "--x0", "0.1,0", "--N", "100", "--T", "0.1", "--dump-paths", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"NBPATH01");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1e-3);
    assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 64);
    let steps = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    assert_eq!(steps, 100);
    let record = 8 * (2 + 2 + 4 + 1) + 1;
    assert_eq!(bytes.len(), 28 + 64 * (8 + steps * record));
}

#[test]
fn stein_sweep_spot_value() {
    let o = bismut(&["stein", "--sweep", "c2=2", "--n", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(2).unwrap().split(',').collect();
    assert!((row[3].parse::<f64>().unwrap() - 0.15343).abs() < 1e-5);
    assert!((row[6].parse::<f64>().unwrap() - 0.20273).abs() < 1e-5);
}

#[test]
fn geometry_and_bound_subcommands_pass() {
    assert!(bismut(&["validate-geometry", "--model", "hemisphere", "--points", "8"]).status.success());
    assert!(bismut(&["validate-geometry", "--model", "half_space_3d", "--ou-k", "0.5", "--points", "8"]).status.success());
    assert!(bismut(&["verify-bounds", "--suite", "grad", "--N", "400"]).status.success());
}
