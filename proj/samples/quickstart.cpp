// Train a small model on synthetic haze for a few epochs, then dehaze one
// held-out image and print PSNR / SSIM before and after.

#include <cstdio>
#include <cstdlib>

#include "dehazeflow/flow.hpp"
#include "dehazeflow/image_io.hpp"
#include "dehazeflow/metrics.hpp"
#include "dehazeflow/training.hpp"

int main(int argc, char** argv) {
  using namespace dehazeflow;
  const auto train = make_synthetic_pairs<float>(16, 32, 32, 11);
  const auto val = make_synthetic_pairs<float>(1, 32, 32, 12);

  FlowConfig flow{SolverKind::kRk4, 2, 0.0, 1.0, 0.5};
  auto model = DehazeModel<float>::create(PurifierConfig{8}, 2, flow, LutMode::kLearnable, 7);
  TrainConfig cfg;
  cfg.epochs = argc > 1 ? static_cast<std::size_t>(std::atoi(argv[1])) : 10;
  cfg.batch_size = 2;
  cfg.optimizer.lr = 1e-2;
  cfg.warmup_epochs = cfg.epochs / 4;
  const auto res = train_loop<float>(model, train, val, cfg);

  const auto& p = val.front();
  const Tensor<float> out = integrate(p.hazy, res.final_model);
  std::printf("hazy     psnr %.2f dB  ssim %.4f\n", psnr(p.hazy, p.clean), ssim(p.hazy, p.clean));
  std::printf("dehazed  psnr %.2f dB  ssim %.4f\n", psnr(out, p.clean), ssim(out, p.clean));
  if (argc > 2) save_image(out, argv[2]);
  return 0;
}
