use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use longicausal::panel::{history_design, load_panel, long_to_wide, read_panel, save_panel, write_panel, ColumnSpec, PanelData};
use longicausal::simgen::{scenario_preset, simulate_panel};
use longicausal::Error;

fn write_csv(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

fn spec_k2() -> ColumnSpec {
    serde_json::from_str(
        r#"{"id": "pid", "A": ["a1", "a2"], "Y": ["y1", "y2"], "L0": ["age", "sex"],
            "categorical": ["sex"], "G": "snp"}"#,
    )
    .unwrap()
}

const FIXTURE: &str = "pid,a1,a2,y1,y2,age,sex,snp
p1,80,95,3.1,2.9,61,F,0
p2,100,70,3.5,3.4,55,M,1
p3,90,210,2.8,2.7,70,F,2
p4,60,85,3.9,3.6,48,M,1
p5,75,99,3.0,2.8,66,F,0
p6,88,92,3.3,3.1,59,M,2
p7,97,81,3.6,3.2,52,F,1
";

#[test]
fn fixture_loads_with_cap_and_dummies() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "wide.csv", FIXTURE);
    let panel = load_panel(&path, &spec_k2()).unwrap();
    // p3 has A2 = 210 > 200 and is dropped
    assert_eq!(panel.n(), 6);
    assert!(!panel.ids.contains(&"p3".to_string()));
    assert_eq!(panel.l0_names, vec!["age".to_string(), "sex=M".to_string()]);
    assert_eq!(panel.l0.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(panel.t.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
    assert_eq!(panel.g.as_ref().unwrap()[1], 1.0);
}

#[test]
fn no_cap_keeps_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "wide.csv", FIXTURE);
    let mut spec = spec_k2();
    spec.exposure_cap = None;
    assert_eq!(load_panel(&path, &spec).unwrap().n(), 7);
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "wide.csv", &FIXTURE.replace("snp", "rs123"));
    match load_panel(&path, &spec_k2()) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "snp"),
        other => panic!("expected MissingColumn, got {other:?}"),
    }
}

#[test]
fn unparsable_cell_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "wide.csv", &FIXTURE.replace("p2,100,70,3.5", "p2,100,70,NA"));
    match load_panel(&path, &spec_k2()) {
        Err(Error::NonFiniteValue { row, col }) => {
            assert_eq!(row, 1);
            assert_eq!(col, "y1");
        }
        other => panic!("expected NonFiniteValue, got {other:?}"),
    }
}

#[test]
fn non_increasing_times_rejected() {
    let body = "id,A1,A2,Y1,Y2,t1,t2\n1,1,2,3,4,2,1\n2,1,2,3,4,1,2\n3,1,2,3,4,1,2\n4,2,1,0,1,1,2\n5,0,1,1,0,1,3\n";
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "wide.csv", body);
    let spec = ColumnSpec::standard(2, &[], false, false);
    assert!(matches!(load_panel(&path, &spec), Err(Error::NonIncreasingTimes(id)) if id == "1"));
}

#[test]
fn simulated_panel_roundtrips_through_disk() {
    let mut cfg = scenario_preset("design1a").unwrap();
    cfg.n = 250;
    let mut panel = simulate_panel(&cfg, 3).unwrap();
    panel.latent.clear();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    save_panel(&panel, &path).unwrap();
    let spec = ColumnSpec::standard(3, &panel.l0_names, true, true);
    let back = load_panel(&path, &spec).unwrap();
    assert_eq!(back, panel);
}

#[test]
fn long_to_wide_orders_visits_by_time() {
    let body = "pid,visit,mpr,ldl,age
a,2,90,3.0,60
a,1,80,3.2,60
b,1,70,3.9,51
b,2,60,3.7,51
";
    let dir = tempfile::tempdir().unwrap();
    let input = write_csv(&dir, "long.csv", body);
    let output = dir.path().join("wide.csv");
    let n = long_to_wide(&input, &output, "pid", "visit", &["mpr".into(), "ldl".into()], &["age".into()]).unwrap();
    assert_eq!(n, 2);
    let text = std::fs::read_to_string(&output).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pid,mpr1,mpr2,ldl1,ldl2,visit1,visit2,age");
    assert_eq!(lines[1], "a,80,90,3.2,3.0,1,2,60");
}

#[test]
fn long_to_wide_rejects_unequal_visits() {
    let body = "pid,visit,mpr\na,1,80\na,2,90\nb,1,70\n";
    let dir = tempfile::tempdir().unwrap();
    let input = write_csv(&dir, "long.csv", body);
    let err = long_to_wide(&input, &dir.path().join("w.csv"), "pid", "visit", &["mpr".into()], &[]).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

fn panel_strategy() -> impl Strategy<Value = PanelData> {
    (1usize..4, 0usize..3, any::<bool>(), any::<bool>()).prop_flat_map(|(k, p0, has_v, has_g)| {
        let n = k + p0 + 2 + 4;
        let vals = proptest::collection::vec(-1e6f64..1e6, n * (3 * k + p0 + 1));
        let gaps = proptest::collection::vec(0.01f64..5.0, n * k);
        (vals, gaps).prop_map(move |(vals, gaps)| {
            let mut it = vals.into_iter();
            let mut take = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| it.next().unwrap());
            let a = take(n, k);
            let y = take(n, k);
            let v = take(n, k);
            let l0 = take(n, p0);
            let g = take(n, 1);
            let mut t = DMatrix::zeros(n, k);
            for i in 0..n {
                let mut acc = 0.0;
                for s in 0..k {
                    acc += gaps[i * k + s];
                    t[(i, s)] = acc;
                }
            }
            PanelData {
                ids: (0..n).map(|i| format!("u{i}")).collect(),
                a,
                y,
                t,
                l0,
                l0_names: (0..p0).map(|c| format!("L{c}")).collect(),
                v: has_v.then_some(v),
                g: has_g.then(|| DVector::from_iterator(n, g.iter().copied())),
                latent: BTreeMap::new(),
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_roundtrip(panel in panel_strategy()) {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            write_panel(&panel, &mut w).unwrap();
            w.flush().unwrap();
        }
        let mut spec = ColumnSpec::standard(panel.k(), &panel.l0_names, panel.v.is_some(), panel.g.is_some());
        spec.exposure_cap = None;
        let back = read_panel(&mut csv::Reader::from_reader(buf.as_slice()), &spec).unwrap();
        prop_assert_eq!(&back.ids, &panel.ids);
        let close = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).amax() <= 1e-12 * x.amax().max(1.0);
        prop_assert!(close(&back.a, &panel.a) && close(&back.y, &panel.y) && close(&back.t, &panel.t));
        prop_assert!(close(&back.l0, &panel.l0));
        prop_assert_eq!(back.v.is_some(), panel.v.is_some());
        prop_assert_eq!(back.g.is_some(), panel.g.is_some());
    }

    #[test]
    fn history_never_leaks_current_or_future(panel in panel_strategy(), drop_first in any::<bool>()) {
        let mut exclude = HashSet::new();
        if drop_first && !panel.l0_names.is_empty() {
            exclude.insert(panel.l0_names[0].clone());
        }
        for j in 1..=panel.k() {
            let Ok(design) = history_design(&panel, j, &exclude) else { continue };
            for name in &design.names {
                for s in j..=panel.k() {
                    prop_assert_ne!(name, &format!("A{s}"));
                    prop_assert_ne!(name, &format!("Y{s}"));
                }
                prop_assert!(!exclude.contains(name));
            }
        }
    }
}
