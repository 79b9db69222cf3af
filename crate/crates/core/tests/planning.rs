use rccm::make_system;
use rccm::planner::{plan, PlanFailure, Scenario};
use rccm::simulation::{nominal_residual, DEFAULT_DT};

fn packaged_with_tubes(position: f64, input: f64) -> Scenario {
    Scenario {
        position_tube: position,
        input_tube: input,
        ..Scenario::packaged()
    }
}

#[test]
fn packaged_scenario_passes_through_a_gap_with_small_tubes() {
    let sys = make_system("pvtol").unwrap();
    let p = plan(&packaged_with_tubes(0.2, 0.1), &sys, DEFAULT_DT).unwrap();
    assert!(p.feasible(), "{:?}", p.failure);
    let nom = p.nominal.as_ref().unwrap();
    assert!(nominal_residual(&sys, nom) < 1e-5);
    let end = nom.x.last().unwrap();
    assert!((end[0] - 22.0).abs() < 1e-6 && (end[1] - 6.0).abs() < 1e-6);
}

#[test]
fn five_fold_tubes_close_every_gap() {
    let sys = make_system("pvtol").unwrap();
    let p = plan(&packaged_with_tubes(1.0, 0.5), &sys, DEFAULT_DT).unwrap();
    assert_eq!(p.failure, Some(PlanFailure::NoCorridor));
}

#[test]
fn packaged_scenario_round_trips() {
    let sc = Scenario::packaged();
    assert_eq!(Scenario::parse(&sc.to_text()).unwrap(), sc);
    assert_eq!(sc.obstacles.len(), 4);
}
