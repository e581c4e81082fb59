use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn solartone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solartone"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn systest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/systest.scenario")
}

#[test]
fn crc_prints_frame_order() {
    let o = solartone(&["crc", "01", "03", "02", "10", "98"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "B4 2E\n");
    assert_eq!(stdout(&solartone(&["crc", "010300080001"])), "05 C8\n");
    assert_eq!(stdout(&solartone(&["crc", "01 03 00 00 00 01"])), "84 0A\n");
}

#[test]
fn crc_rejects_bad_hex() {
    assert_eq!(solartone(&["crc", "0g"]).status.code(), Some(2));
    assert_eq!(solartone(&["crc", "123"]).status.code(), Some(2));
}

#[test]
fn encode_matches_the_ten_am_reading() {
    let o = solartone(&["encode", "13.66,6.17,13.76,0.00,0.00"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "#1366#617#1376#00#00#\n");
}

#[test]
fn decode_reads_hundredths() {
    let o = solartone(&["decode", "#01#00#00#00#00#"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0.01,0.00,0.00,0.00,0.00\n");
}

#[test]
fn encode_then_decode_is_identity() {
    let records = ["12.53,4.07,12.43,4.07,17.00", "0.00,0.00,11.49,0.00,9999.99", "21.60,0.10,12.70,0.00,3.00"];
    let tones = stdout(&solartone(&["encode", records[0], records[1], records[2]]));
    let back = stdout(&solartone(&["decode", tones.trim()]));
    assert_eq!(back.lines().collect::<Vec<_>>(), records);
}

#[test]
fn codec_errors_are_validation_errors() {
    assert_eq!(solartone(&["encode", "1,2,3"]).status.code(), Some(2));
    assert_eq!(solartone(&["encode", "10000,0,0,0,0"]).status.code(), Some(2));
    let four = "1,1,1,1,1";
    assert_eq!(solartone(&["encode", four, four, four, four]).status.code(), Some(2));
    assert_eq!(solartone(&["decode", "#12#x#"]).status.code(), Some(2));
    assert_eq!(solartone(&["decode", "#1366#617#"]).status.code(), Some(2));
}

#[test]
fn decode_salvages_marked_losses() {
    let o = solartone(&["decode", "#1366#617#13?6#00#00#"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "13.66,6.17,,0.00,0.00\n");
}

#[test]
fn simulate_systest_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = solartone(&["simulate", systest().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["store.tsv", "notifications.log", "billing.tsv", "events.log"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let notes = fs::read_to_string(out.join("notifications.log")).unwrap();
    assert!(notes.starts_with("2010-11-28T0"), "{}", notes.lines().next().unwrap_or(""));

    let store = out.join("store.tsv");
    let o = solartone(&["report", store.to_str().unwrap(), "--device", "0977000001"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<(String, f64, f64)> = text
        .lines()
        .skip(2)
        .take_while(|l| !l.starts_with('#'))
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[0].to_string(), c[1].parse().unwrap(), c[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 24);
    let v = |hour: &str| rows.iter().find(|r| r.0.contains(hour)).unwrap().1;
    // daytime rise, evening plateau, decline under the night load
    assert!(v("T12:") > v("T07:"));
    assert_eq!(v("T19:"), v("T20:"));
    assert!(v("T23:") < v("T21:") && v("T21:") < v("T20:"));
    assert!(rows.iter().any(|r| r.2 > 10.0), "array current peaks by midday");
    assert!(text.contains("# alarm\t2010-11-28T0"), "{text}");
    assert!(text.contains("# battery_v_min\t"));
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("noisy.scenario");
    let text = fs::read_to_string(systest()).unwrap().replace("tone_drop_probability = 0.0", "tone_drop_probability = 0.03");
    fs::write(&scenario, text).unwrap();
    let mut outputs = Vec::new();
    for (run, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = dir.path().join(run);
        let o = solartone(&["simulate", scenario.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(["store.tsv", "notifications.log", "billing.tsv"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0][0], outputs[2][0], "a different seed drops different tones");
}

#[test]
fn zero_duration_gives_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("empty.scenario");
    fs::write(&scenario, "[scenario]\nname = \"empty\"\nduration_s = 0\n\n[device]\nlvd_cutoff = 11.5\n").unwrap();
    let out = dir.path().join("out");
    let o = solartone(&["simulate", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("store.tsv")).unwrap(), "");
}

#[test]
fn scenario_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.scenario");
    fs::write(&scenario, "[scenario]\nname = \"bad\"\n\n[device]\nlvd_cutoff = -3.0\n").unwrap();
    let o = solartone(&["simulate", scenario.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5:"), "{}", stderr(&o));
}

#[test]
fn missing_scenario_is_a_runtime_error() {
    assert_eq!(solartone(&["simulate", "/nonexistent/x.scenario"]).status.code(), Some(1));
}

#[test]
fn report_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.tsv");
    fs::write(&store, "2010-11-27T10:00:15\t0977000001\tpoll\t13.66\t6.17\t13.76\t0.00\t0.00\t0\n").unwrap();
    let s = store.to_str().unwrap();

    let o = solartone(&["report", s, "--device", "0977000001"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2, "header plus one row:\n{text}");
    assert!(text.contains("2010-11-27T10:00:15\t13.76\t6.17\t0.00\n"));

    let o = solartone(&["report", s, "--device", "0977000001", "--from", "2010-11-28T00:00:00"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no records"));

    assert_eq!(solartone(&["report", s, "--device", "0977000001", "--to", "yesterday"]).status.code(), Some(2));

    fs::write(&store, "garbage\n").unwrap();
    let o = solartone(&["report", s, "--device", "0977000001"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}
