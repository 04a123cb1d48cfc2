use maniqa::error::Error;
use maniqa::gradcheck::GradCheck;
use maniqa::harness::gradsuite::{block_cases, op_cases, registered_cases, run_suite, GradCase};

#[test]
fn every_registered_case_passes_in_under_a_minute() {
    let report = run_suite(&registered_cases(), &GradCheck::default()).unwrap();
    for r in &report.reports {
        assert!(r.passed, "{} max rel err {:.3e}", r.op, r.max_rel_error);
        assert!(r.max_rel_error < 1e-4);
    }
    assert!(report.passed);
    assert!(report.seconds < 60.0, "suite took {:.1}s", report.seconds);
}

#[test]
fn registry_covers_ops_and_blocks() {
    let names: Vec<String> = registered_cases().into_iter().map(|c| c.name).collect();
    for required in [
        "matmul", "softmax_last", "layer_norm", "gelu", "conv2d", "gather",
        "tab_forward", "stl_forward", "stl_forward_shifted", "sstb_forward", "head", "full_model_micro",
    ] {
        assert!(names.iter().any(|n| n == required), "missing {required}");
    }
    assert_eq!(names.len(), op_cases().len() + block_cases().len());
}

fn find(name: &str) -> GradCase {
    registered_cases().into_iter().find(|c| c.name == name).unwrap()
}

#[test]
fn corrupted_gradient_is_reported_with_op_name() {
    for name in ["matmul", "softmax_last", "tab_forward"] {
        let report = find(name).corrupted(1.01).run(&GradCheck::default()).unwrap();
        assert!(!report.passed, "{name} corruption went unnoticed");
        match report.into_result() {
            Err(Error::GradCheck { op, .. }) => assert_eq!(op, name),
            other => panic!("expected a grad-check error, got {other:?}"),
        }
    }
}

#[test]
fn suite_report_names_the_failing_case() {
    let cases = vec![find("add"), find("gelu").corrupted(0.9)];
    let report = run_suite(&cases, &GradCheck::default()).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst().unwrap().op, "gelu");
    let text = report.to_text();
    assert!(text.lines().any(|l| l.starts_with("add") && l.contains("PASS")));
    assert!(text.lines().any(|l| l.starts_with("gelu") && l.contains("FAIL")));
}
