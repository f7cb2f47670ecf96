#[path = "common/gradcases.rs"]
mod gradcases;

macro_rules! cases {
    ($($name:ident),*) => {$(
        #[test]
        fn $name() {
            let (_, case, tol) = gradcases::CASES.iter().find(|c| c.0 == stringify!($name)).unwrap();
            let worst = case();
            assert!(worst < *tol, "worst relative error {worst}");
        }
    )*};
}

cases!(
    elementwise_ops,
    scale_by_scalar,
    matmul_all_transpose_modes,
    relu_away_from_kink,
    conv2d_input_kernel_bias,
    batch_norm_train_mode,
    batch_norm_infer_mode,
    complex_soft_threshold,
    complex_matmuls_and_norm,
    full_denoiser_loss,
    full_lista_loss
);
