mod common;

use common::oracle_cases;

macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                oracle_cases::$name();
            }
        )*
    };
}

cases!(
    conv2d_matches_direct_loops,
    upsample_matches_closed_form,
    nms_matches_quadratic_reference,
    iou_matches_rasterization,
    roi_pool_matches_exhaustive_max,
    ap_micro_cases,
);
