use planar_trap::analysis::{HeightVoltageSeries, SeriesPoint};
use planar_trap::potential::rect_unit_potential;
use planar_trap::vision::calibrate;
use planar_trap::{Rect, TrapGeometry, TrapModel, Vec3};
use proptest::prelude::*;

fn model() -> &'static TrapModel {
    use std::sync::OnceLock;
    static M: OnceLock<TrapModel> = OnceLock::new();
    M.get_or_init(|| TrapModel::new(TrapGeometry::default()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dc_potential_obeys_maximum_principle(v in -300.0f64..300.0, x in -0.05f64..0.05, y in 1e-6f64..0.1) {
        let phi = model().dc_potential_2d(v, x, y).unwrap();
        prop_assert!(phi.abs() <= v.abs() * (1.0 + 1e-12));
        prop_assert!(phi * v >= 0.0);
    }

    #[test]
    fn ac_potential_between_rail_levels(x in -0.05f64..0.05, y in 1e-6f64..0.1) {
        let phi = model().ac_potential_2d(x, y).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&phi), "{}", phi);
    }

    #[test]
    fn fields_mirror_about_centerline(dx in 0.0f64..0.02, y in 1e-4f64..0.03) {
        let m = model();
        let x0 = m.geometry().center_x();
        let (l, r) = (m.ac_potential_2d(x0 - dx, y).unwrap(), m.ac_potential_2d(x0 + dx, y).unwrap());
        prop_assert!((l - r).abs() <= 1e-12 * l.abs().max(1e-300) + 1e-15);
        let (gl, gr) = (m.ac_gradient_2d(x0 - dx, y).unwrap(), m.ac_gradient_2d(x0 + dx, y).unwrap());
        prop_assert!((gl[0] + gr[0]).abs() <= 1e-9 * gl[0].abs().max(1.0));
    }

    #[test]
    fn rectangle_potential_is_a_solid_angle_fraction(
        x1 in -0.02f64..0.02, w in 1e-4f64..0.02, z1 in -0.02f64..0.02, d in 1e-4f64..0.02,
        px in -0.05f64..0.05, py in 1e-6f64..0.05, pz in -0.05f64..0.05,
    ) {
        let u = rect_unit_potential(&Rect::new(x1, x1 + w, z1, z1 + d), &Vec3::new(px, py, pz));
        prop_assert!((0.0..=1.0).contains(&u), "{}", u);
    }

    #[test]
    fn calibration_roundtrip(p1 in -1000.0f64..1000.0, dp in 1.0f64..500.0, m1 in -50.0f64..50.0, dm in 0.1f64..50.0, px in -2000.0f64..2000.0) {
        let cal = calibrate((p1, m1), (p1 + dp, m1 + dm)).unwrap();
        let back = cal.px_of(cal.mm_of(px));
        prop_assert!((back - px).abs() <= 1e-12 * px.abs().max(1.0) * 1e3);
        prop_assert!((cal.mm_of(p1) - m1).abs() <= 1e-9);
    }

    #[test]
    fn series_csv_roundtrip(rows in prop::collection::vec((-300.0f64..0.0, 1e-4f64..0.02, 1e-7f64..1e-3, 0.0f64..1e-3), 0..20)) {
        let series = HeightVoltageSeries {
            points: rows
                .iter()
                .map(|&(v, y, s, a)| SeriesPoint { v_central: v, y, sigma_y: s, alpha: a, sigma_alpha: s })
                .collect(),
        };
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = HeightVoltageSeries::read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), series.len());
        for (a, b) in back.points.iter().zip(&series.points) {
            prop_assert_eq!(a.v_central, b.v_central);
            prop_assert!((a.y - b.y).abs() <= 1e-15 * b.y.abs().max(1e-3));
            prop_assert!((a.alpha - b.alpha).abs() <= 1e-15 * b.alpha.abs().max(1e-3));
        }
    }
}
