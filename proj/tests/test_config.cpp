#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "forge/common.hpp"
#include "forge/config.hpp"

using forge::Error;
using forge::harness::ExperimentConfig;

namespace {

std::string error_code(const std::string& json_text) {
  try {
    forge::harness::parse_config(json_text);
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

std::string error_message(const std::string& json_text) {
  try {
    forge::harness::parse_config(json_text);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// Every field moved off its default, staying inside the validated ranges.
ExperimentConfig exotic_config() {
  ExperimentConfig c;
  c.datagen.image_h = 96;
  c.datagen.image_w = 80;
  c.datagen.world_extent = 12.5;
  c.datagen.num_landmarks = 4;
  c.datagen.radius_min = 1.0;
  c.datagen.radius_max = 1.5;
  c.datagen.n_source = 5;
  c.datagen.n_target = 7;
  c.datagen.n_frames = 9;
  c.datagen.n_pair_worlds = 3;
  c.datagen.pairs_per_landmark = 2;
  c.datagen.seq_drift = 0.25;
  c.datagen.view.azimuth_min = 0.5;
  c.datagen.view.azimuth_max = 5.5;
  c.datagen.view.elevation_min = 0.625;
  c.datagen.view.elevation_max = 1.125;
  c.datagen.view.scale_min = 0.75;
  c.datagen.view.scale_max = 1.25;
  c.datagen.view.rotation_min = -1.5;
  c.datagen.view.rotation_max = 1.5;
  c.datagen.view.offset_jitter = 0.875;
  c.datagen.pair_jitter.d_azimuth = 0.375;
  c.datagen.pair_jitter.d_elevation = 0.125;
  c.datagen.pair_jitter.d_scale = 0.1875;
  c.datagen.pair_jitter.d_rotation = 0.5;
  c.datagen.pair_jitter.d_offset = 0.625;
  c.datagen.pair_jitter.min_delta = 0.0625;
  c.datagen.shift.gamma = 1.375;
  c.datagen.shift.noise_sigma = 0.03125;
  c.datagen.shift.texture_gain = 0.5;
  c.datagen.shift.haze = 0.25;
  c.detector.w_box = 4.5;
  c.detector.w_obj = 1.25;
  c.detector.w_class = 0.75;
  c.detector.conf_threshold = 0.375;
  c.detector.nms_iou = 0.5;
  c.adapt.lambda_grl = 0.5;
  c.adapt.w_global = 2.0;
  c.adapt.w_reg = 0.25;
  c.adapt.w_vsa_adv = 0.125;
  c.adapt.w_vsa_con = 0.0625;
  c.adapt.top_k = 9;
  c.adapt.sim_threshold = 0.625;
  c.adapt.temperature = 0.05;
  c.adapt.instance_conf = 0.4375;
  c.mars.alpha_channel = 0.75;
  c.mars.alpha_spatial = 0.125;
  c.mars.tau = 0.15625;
  c.mars.stages = {0, 2};
  c.optimizer.learning_rate = 0.0078125;
  c.optimizer.steps = 321;
  c.optimizer.batch_size = 5;
  c.optimizer.seed = 18446744073709551615ULL;  // 2^64 - 1
  c.ablation.adapt_enabled = false;
  c.ablation.mars_enabled = false;
  return c;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults round trip and an empty document means defaults") {
    const ExperimentConfig def;
    const std::string text = forge::harness::serialize_config(def);
    const ExperimentConfig back = forge::harness::parse_config(text);
    CHECK(forge::harness::serialize_config(back) == text);

    const ExperimentConfig empty = forge::harness::parse_config("{}");
    CHECK(forge::harness::serialize_config(empty) == text);
    CHECK(empty.datagen.n_source == 16);
    CHECK(empty.optimizer.steps == 200);
    CHECK(empty.mars.stages == std::vector<int>{1, 2});
    CHECK(empty.ablation.adapt_enabled);
  }

  TEST_CASE("every field survives serialization exactly") {
    const ExperimentConfig c = exotic_config();
    const ExperimentConfig b = forge::harness::parse_config(forge::harness::serialize_config(c));

    CHECK(b.datagen.image_h == 96);
    CHECK(b.datagen.image_w == 80);
    CHECK(b.datagen.world_extent == 12.5);
    CHECK(b.datagen.num_landmarks == 4);
    CHECK(b.datagen.radius_min == 1.0);
    CHECK(b.datagen.radius_max == 1.5);
    CHECK(b.datagen.n_source == 5);
    CHECK(b.datagen.n_target == 7);
    CHECK(b.datagen.n_frames == 9);
    CHECK(b.datagen.n_pair_worlds == 3);
    CHECK(b.datagen.pairs_per_landmark == 2);
    CHECK(b.datagen.seq_drift == 0.25);
    CHECK(b.datagen.view.azimuth_min == 0.5);
    CHECK(b.datagen.view.azimuth_max == 5.5);
    CHECK(b.datagen.view.elevation_min == 0.625);
    CHECK(b.datagen.view.elevation_max == 1.125);
    CHECK(b.datagen.view.scale_min == 0.75);
    CHECK(b.datagen.view.scale_max == 1.25);
    CHECK(b.datagen.view.rotation_min == -1.5);
    CHECK(b.datagen.view.rotation_max == 1.5);
    CHECK(b.datagen.view.offset_jitter == 0.875);
    CHECK(b.datagen.pair_jitter.d_azimuth == 0.375);
    CHECK(b.datagen.pair_jitter.d_elevation == 0.125);
    CHECK(b.datagen.pair_jitter.d_scale == 0.1875);
    CHECK(b.datagen.pair_jitter.d_rotation == 0.5);
    CHECK(b.datagen.pair_jitter.d_offset == 0.625);
    CHECK(b.datagen.pair_jitter.min_delta == 0.0625);
    CHECK(b.datagen.shift.gamma == 1.375);
    CHECK(b.datagen.shift.noise_sigma == 0.03125);
    CHECK(b.datagen.shift.texture_gain == 0.5);
    CHECK(b.datagen.shift.haze == 0.25);
    CHECK(b.detector.w_box == 4.5);
    CHECK(b.detector.w_obj == 1.25);
    CHECK(b.detector.w_class == 0.75);
    CHECK(b.detector.conf_threshold == 0.375);
    CHECK(b.detector.nms_iou == 0.5);
    CHECK(b.adapt.lambda_grl == 0.5);
    CHECK(b.adapt.w_global == 2.0);
    CHECK(b.adapt.w_reg == 0.25);
    CHECK(b.adapt.w_vsa_adv == 0.125);
    CHECK(b.adapt.w_vsa_con == 0.0625);
    CHECK(b.adapt.top_k == 9);
    CHECK(b.adapt.sim_threshold == 0.625);
    CHECK(b.adapt.temperature == 0.05);
    CHECK(b.adapt.instance_conf == 0.4375);
    CHECK(b.mars.alpha_channel == 0.75);
    CHECK(b.mars.alpha_spatial == 0.125);
    CHECK(b.mars.tau == 0.15625);
    CHECK(b.mars.stages == std::vector<int>{0, 2});
    CHECK(b.optimizer.learning_rate == 0.0078125);
    CHECK(b.optimizer.steps == 321);
    CHECK(b.optimizer.batch_size == 5);
    CHECK(b.optimizer.seed == 18446744073709551615ULL);
    CHECK_FALSE(b.ablation.adapt_enabled);
    CHECK_FALSE(b.ablation.mars_enabled);

    // Serialization is canonical: a second pass reproduces the same text.
    CHECK(forge::harness::serialize_config(b) == forge::harness::serialize_config(c));
  }

  TEST_CASE("partial documents keep defaults elsewhere") {
    const ExperimentConfig c =
        forge::harness::parse_config(R"({"optimizer":{"steps":7},"mars":{"tau":0.4}})");
    CHECK(c.optimizer.steps == 7);
    CHECK(c.optimizer.learning_rate == 0.01);
    CHECK(c.mars.tau == 0.4);
    CHECK(c.mars.alpha_channel == 0.5);
    CHECK(c.datagen.n_source == 16);
    CHECK(c.detector.conf_threshold == 0.25);
  }

  TEST_CASE("unknown fields are hard errors with a dotted path") {
    CHECK(error_code(R"({"datagenn":{}})") == "config_error");
    CHECK(error_message(R"({"datagenn":{}})").find("unknown field") != std::string::npos);
    CHECK(error_message(R"({"datagenn":{}})").find("config.datagenn") != std::string::npos);

    CHECK(error_code(R"({"optimizer":{"lr":0.1}})") == "config_error");
    CHECK(error_message(R"({"optimizer":{"lr":0.1}})").find("optimizer.lr") !=
          std::string::npos);

    CHECK(error_code(R"({"datagen":{"view":{"az":1.0}}})") == "config_error");
    CHECK(error_message(R"({"datagen":{"view":{"az":1.0}}})").find("datagen.view.az") !=
          std::string::npos);

    CHECK(error_code(R"({"datagen":{"shift":{"fog":0.1}}})") == "config_error");
    CHECK(error_code(R"({"ablation":{"mars":true}})") == "config_error");
  }

  TEST_CASE("type mismatches are config errors") {
    CHECK(error_code(R"({"optimizer":{"steps":0.5}})") == "config_error");
    CHECK(error_code(R"({"optimizer":{"steps":"many"}})") == "config_error");
    CHECK(error_code(R"({"optimizer":{"learning_rate":"fast"}})") == "config_error");
    CHECK(error_code(R"({"ablation":{"adapt_enabled":1}})") == "config_error");
    CHECK(error_code(R"({"mars":{"stages":[1,"a"]}})") == "config_error");
    CHECK(error_code(R"({"mars":{"stages":2}})") == "config_error");
    CHECK(error_code(R"({"datagen":[]})") == "config_error");
    CHECK(error_code("[1,2]") == "config_error");
    CHECK(error_code("{") == "config_error");
    CHECK(error_code("") == "config_error");
  }

  TEST_CASE("integer-valued doubles parse, fractional integers do not") {
    const ExperimentConfig c = forge::harness::parse_config(R"({"detector":{"w_box":3}})");
    CHECK(c.detector.w_box == 3.0);
    CHECK(error_code(R"({"datagen":{"num_landmarks":2.5}})") == "config_error");
  }

  TEST_CASE("range validation rejects broken configs") {
    CHECK(error_code(R"({"optimizer":{"learning_rate":0.0}})") == "config_error");
    CHECK(error_code(R"({"optimizer":{"learning_rate":-1.0}})") == "config_error");
    CHECK(error_code(R"({"optimizer":{"steps":-1}})") == "config_error");
    CHECK(error_code(R"({"optimizer":{"batch_size":0}})") == "config_error");
    CHECK(error_code(R"({"datagen":{"image_h":16}})") == "config_error");
    CHECK(error_code(R"({"datagen":{"num_landmarks":0}})") == "config_error");
    CHECK(error_code(R"({"datagen":{"radius_min":2.0,"radius_max":1.0}})") == "config_error");
    CHECK(error_code(R"({"datagen":{"n_source":-1}})") == "config_error");
    CHECK(error_code(R"({"datagen":{"pairs_per_landmark":0}})") == "config_error");
    CHECK(error_code(R"({"detector":{"conf_threshold":1.5}})") == "config_error");
    CHECK(error_code(R"({"detector":{"nms_iou":-0.1}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"lambda_grl":-0.5}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"w_reg":-1.0}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"top_k":0}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"sim_threshold":1.5}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"temperature":0.0}})") == "config_error");
    CHECK(error_code(R"({"adapt":{"instance_conf":2.0}})") == "config_error");
    CHECK(error_code(R"({"mars":{"alpha_channel":-0.1}})") == "config_error");
    CHECK(error_code(R"({"mars":{"tau":0.0}})") == "config_error");
    CHECK(error_code(R"({"mars":{"stages":[3]}})") == "config_error");
    CHECK(error_code(R"({"mars":{"stages":[-1]}})") == "config_error");
  }

  TEST_CASE("hash matches an independent FNV-1a over the canonical text") {
    const ExperimentConfig c = exotic_config();
    const std::string text = forge::harness::serialize_config(c);
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : text) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    CHECK(forge::harness::config_hash(c) == h);

    CHECK(forge::harness::config_hash(c) == forge::harness::config_hash(c));
    ExperimentConfig d = c;
    d.optimizer.seed -= 1;
    CHECK(forge::harness::config_hash(d) != forge::harness::config_hash(c));
    ExperimentConfig e = c;
    e.ablation.mars_enabled = true;
    CHECK(forge::harness::config_hash(e) != forge::harness::config_hash(c));
  }

  TEST_CASE("files load like strings") {
    namespace fs = std::filesystem;
    const fs::path dir("config_test_tmp");
    fs::create_directories(dir);
    const std::string path = (dir / "run.json").string();
    {
      std::ofstream f(path);
      f << R"({"optimizer":{"steps":11,"seed":42}})";
    }
    const ExperimentConfig c = forge::harness::load_config(path);
    CHECK(c.optimizer.steps == 11);
    CHECK(c.optimizer.seed == 42);

    try {
      forge::harness::load_config((dir / "absent.json").string());
      FAIL("expected a missing-file error");
    } catch (const Error& e) {
      CHECK(e.code() == "config_error");
    }
    fs::remove_all(dir);
  }
}
