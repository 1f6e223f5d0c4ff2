#pragma once

// A small trained classifier shared by tests that need one. ctest runs every
// test case in its own process, so the checkpoint is cached on disk.

#include <advrsa/checkpoint.hpp>
#include <advrsa/dataset.hpp>
#include <advrsa/training.hpp>

#include <filesystem>
#include <string>
#include <unistd.h>

#ifndef ADVRSA_TEST_CACHE_DIR
#define ADVRSA_TEST_CACHE_DIR "."
#endif

namespace fixture {

inline advrsa::DatasetSpec small_spec() {
  advrsa::DatasetSpec s;
  s.classes = 4;
  s.train_per_class = 80;
  s.val_per_class = 20;
  s.seed = 77;
  return s;
}

inline const advrsa::Dataset& small_dataset() {
  static const advrsa::Dataset d = advrsa::generate_dataset(small_spec());
  return d;
}

inline const advrsa::Network& small_network() {
  static const advrsa::Network net = [] {
    namespace fs = std::filesystem;
    const fs::path path = fs::path(ADVRSA_TEST_CACHE_DIR) / "small_net.ckpt";
    if (fs::exists(path)) return advrsa::load_checkpoint(path).network;
    advrsa::Network n = advrsa::Network::initialized(advrsa::NetworkConfig::toy(4), 5);
    advrsa::TrainConfig tc;
    tc.epochs = 12;
    tc.seed = 6;
    advrsa::train(n, small_dataset().train, small_dataset().val, tc);
    const fs::path tmp = path.string() + "." + std::to_string(::getpid());
    advrsa::save_checkpoint(tmp, {n, {5, tc.epochs, 0.0, ""}});
    fs::rename(tmp, path);
    return n;
  }();
  return net;
}

}  // namespace fixture
