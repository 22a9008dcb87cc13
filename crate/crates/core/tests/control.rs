use mfc::control::{Atom, RelaxedControl};
use mfc::measure::uniform_grid;
use mfc::model::ActionSet;
use proptest::prelude::*;

fn relaxed(
    intervals: usize,
    raw: &[(f64, f64)],
    per: usize,
) -> (RelaxedControl<f64>, ActionSet<f64>) {
    let set = ActionSet::interval(-2.0, 2.0).unwrap();
    let atoms = (0..intervals)
        .map(|k| {
            let chunk = &raw[k * per..(k + 1) * per];
            let total: f64 = chunk.iter().map(|c| c.1).sum();
            chunk
                .iter()
                .map(|&(a, w)| Atom::new(vec![a], w / total))
                .collect()
        })
        .collect();
    (
        RelaxedControl::new(uniform_grid(1.0, intervals), atoms, &set).unwrap(),
        set,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn chattering_approaches_the_relaxed_control(
        intervals in 1usize..4,
        per in 2usize..4,
        raw in prop::collection::vec((-2.0f64..2.0, 0.5f64..1.0), 12),
    ) {
        let (q, _) = relaxed(intervals, &raw, per);
        let d: Vec<f64> = (1..=6)
            .filter_map(|j| q.chatter(1 << j).ok())
            .map(|s| {
                prop_assert!(s.is_strict());
                Ok(s.bounded_lipschitz_distance(&q).unwrap())
            })
            .collect::<Result<_, _>>()?;
        prop_assert!(d.len() >= 2);
        let rises = d.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
        prop_assert!(rises <= 2, "distances {:?}", d);
        prop_assert!(d.last().unwrap() < d.first().unwrap());
    }

    #[test]
    fn truncation_moves_less_as_the_radius_grows(
        intervals in 1usize..4,
        raw in prop::collection::vec((-2.0f64..2.0, 0.05f64..1.0), 9),
    ) {
        let (q, set) = relaxed(intervals, &raw, 3);
        let d: Vec<f64> = [0.25, 0.5, 1.0, 1.5, 2.0]
            .iter()
            .map(|&r| q.truncate(r, &set).bounded_lipschitz_distance(&q).unwrap())
            .collect();
        prop_assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "distances {:?}", d);
        prop_assert!(d[4].abs() < 1e-12);
        for r in [0.25, 1.0] {
            let t = q.truncate(r, &set);
            for k in 0..t.intervals() {
                prop_assert!(t.atoms(k).iter().all(|a| a.action[0].abs() <= r + 1e-12));
            }
        }
    }
}

#[test]
fn chattering_keeps_the_time_fractions() {
    let set = ActionSet::finite(vec![vec![-1.0], vec![1.0]]).unwrap();
    let q = RelaxedControl::stationary(
        vec![Atom::new(vec![-1.0], 0.25), Atom::new(vec![1.0], 0.75)],
        uniform_grid(1.0, 2),
        &set,
    )
    .unwrap();
    let s = q.chatter(8).unwrap();
    assert_eq!(s.intervals(), 16);
    let plus = (0..16).filter(|&k| s.atoms(k)[0].action[0] > 0.0).count();
    assert_eq!(plus, 12);
}
