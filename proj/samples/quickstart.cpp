// Trains CE and LPF on one synthetic benchmark and compares them on the shifted test split.

#include <cstdio>

#include "lpf/lpf.hpp"

int main() {
  lpf::BenchmarkConfig bench;
  bench.seed = 1;
  const lpf::Benchmark data = lpf::generate_benchmark(bench);
  const lpf::PriorTable train_prior = lpf::empirical_prior(data.train);

  std::printf("question-only ceiling %.3f, prior trap on shifted split %.3f\n",
              lpf::question_only_ceiling(data.priors.train),
              lpf::prior_trap_accuracy(data.priors.train, data.priors.test));

  for (const lpf::LossVariant& v : {lpf::LossVariant::ce(), lpf::LossVariant::lpf(5.0)}) {
    lpf::TrainConfig cfg;
    cfg.variant = v;
    cfg.seed = bench.seed;
    cfg.model = lpf::model_config_for(bench);
    cfg.model.seed = bench.seed;
    const lpf::TrainResult run = lpf::train(data.train, cfg);

    const lpf::EvalReport id = lpf::evaluate(run.params, data.id_test, &train_prior);
    const lpf::EvalReport ood = lpf::evaluate(run.params, data.ood_test, &train_prior);
    std::printf("%-4s gamma=%g  id %.3f  ood %.3f  ood KL to truth %.3f  final mean beta %.3f\n",
                std::string(lpf::to_string(v.kind)).c_str(), v.gamma, id.accuracy, ood.accuracy,
                ood.mean_kl_to_split, run.log.epochs.back().mean_beta);
  }
}
