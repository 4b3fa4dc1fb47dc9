#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "satstereo/pair_selection.hpp"
#include "satstereo/rng.hpp"

using namespace satstereo;

namespace {

ImageMeta meta(const char* id, const char* time, double az, double el) {
  return {id, {az, el, time}};
}

}  // namespace

TEST_CASE("time parsing: days since epoch with fractions") {
  CHECK(parse_time_days("1970-01-01T00:00:00Z") == 0.0);
  CHECK(parse_time_days("1970-01-02T12:00:00Z") == doctest::Approx(1.5));
  const double a = parse_time_days("2016-03-01T10:30:00Z");
  const double b = parse_time_days("2016-03-31T10:30:00Z");
  CHECK(b - a == doctest::Approx(30.0));
  // leap year handling
  CHECK(parse_time_days("2016-03-01T00:00:00Z") -
            parse_time_days("2016-02-28T00:00:00Z") ==
        doctest::Approx(2.0));
  CHECK_THROWS(parse_time_days("not-a-time"));
}

TEST_CASE("filter_images: off-nadir bounds are inclusive") {
  SelectionConfig cfg;  // [5, 35]
  std::vector<ImageMeta> metas = {
      meta("near_nadir", "2016-01-01T10:00:00Z", 10, 88),   // off-nadir 2
      meta("good", "2016-01-02T10:00:00Z", 20, 70),          // 20
      meta("boundary", "2016-01-03T10:00:00Z", 30, 85),      // 5 exactly
      meta("too_oblique", "2016-01-04T10:00:00Z", 40, 50),   // 40
  };
  const auto kept = filter_images(metas, cfg);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].id == "good");
  CHECK(kept[1].id == "boundary");
}

TEST_CASE("select_pairs: single image yields nothing") {
  SelectionConfig cfg;
  CHECK(select_pairs({meta("only", "2016-01-01T10:00:00Z", 0, 70)}, cfg).empty());
}

TEST_CASE("select_pairs: matches exhaustive enumeration on a crafted set") {
  SelectionConfig cfg;
  cfg.max_time_diff = 100;
  cfg.max_view_diff = 12;
  cfg.min_intersection = 5;
  cfg.max_intersection = 40;

  const std::vector<ImageMeta> metas = {
      meta("img_a", "2016-01-01T10:00:00Z", 40, 75),
      meta("img_b", "2016-01-20T10:05:00Z", 190, 72),
      meta("img_c", "2016-03-01T10:10:00Z", 110, 64),
      meta("img_d", "2016-06-15T10:15:00Z", 300, 78),
      meta("img_e", "2016-01-05T10:20:00Z", 85, 52),  // off-nadir 38: dropped
  };
  const auto pairs = select_pairs(metas, cfg);

  // Independent brute-force oracle over all C(5,2) pairs.
  std::vector<PairRecord> expected;
  const auto kept = filter_images(metas, cfg);
  for (size_t i = 0; i < kept.size(); ++i)
    for (size_t j = i + 1; j < kept.size(); ++j) {
      const auto& a = kept[i].id < kept[j].id ? kept[i] : kept[j];
      const auto& b = kept[i].id < kept[j].id ? kept[j] : kept[i];
      const double tau = std::abs(parse_time_days(a.geom.acquisition_time) -
                                  parse_time_days(b.geom.acquisition_time));
      const double dview = std::abs(off_nadir_deg(a.geom) - off_nadir_deg(b.geom));
      const double theta = intersection_angle_deg(a.geom, b.geom);
      if (tau <= cfg.max_time_diff && dview <= cfg.max_view_diff &&
          theta >= cfg.min_intersection && theta <= cfg.max_intersection)
        expected.push_back({a.id, b.id, tau, dview, theta});
    }
  std::sort(expected.begin(), expected.end(),
            [](const PairRecord& a, const PairRecord& b) {
              if (a.tau_days != b.tau_days) return a.tau_days < b.tau_days;
              if (a.id_a != b.id_a) return a.id_a < b.id_a;
              return a.id_b < b.id_b;
            });

  REQUIRE(pairs.size() == expected.size());
  REQUIRE(!pairs.empty());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].id_a == expected[i].id_a);
    CHECK(pairs[i].id_b == expected[i].id_b);
    CHECK(pairs[i].tau_days == doctest::Approx(expected[i].tau_days));
    CHECK(pairs[i].theta_deg == doctest::Approx(expected[i].theta_deg));
  }
}

TEST_CASE("select_pairs: sorted by tau, order-invariant, thresholds hold") {
  Rng rng(3);
  std::vector<ImageMeta> metas;
  for (int i = 0; i < 12; ++i) {
    char id[16], t[40];
    std::snprintf(id, sizeof(id), "img_%02d", i);
    std::snprintf(t, sizeof(t), "2016-%02d-%02dT10:%02d:00Z",
                  1 + static_cast<int>(rng.next_below(11)),
                  1 + static_cast<int>(rng.next_below(27)),
                  static_cast<int>(rng.next_below(60)));
    metas.push_back(meta(id, t, rng.uniform(0, 360), rng.uniform(55, 88)));
  }
  SelectionConfig cfg;
  const auto pairs = select_pairs(metas, cfg);
  REQUIRE(pairs.size() >= 3);
  for (size_t i = 1; i < pairs.size(); ++i)
    CHECK(pairs[i - 1].tau_days <= pairs[i].tau_days);
  for (const auto& p : pairs) {
    CHECK(p.tau_days <= cfg.max_time_diff);
    CHECK(p.dview_deg <= cfg.max_view_diff);
    CHECK(p.theta_deg >= cfg.min_intersection);
    CHECK(p.theta_deg <= cfg.max_intersection);
    CHECK(p.id_a < p.id_b);
  }

  // shuffled input gives the identical selection
  std::vector<ImageMeta> shuffled = metas;
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.next_below(i)]);
  const auto pairs2 = select_pairs(shuffled, cfg);
  REQUIRE(pairs2.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].id_a == pairs2[i].id_a);
    CHECK(pairs[i].id_b == pairs2[i].id_b);
  }
}

TEST_CASE("meta and pair record files round trip") {
  const std::vector<ImageMeta> metas = {
      meta("v0", "2016-01-01T10:00:00Z", 123.25, 71.5),
      meta("v1", "2016-02-11T10:30:30Z", 310.125, 64.0625),
  };
  const auto dir = std::filesystem::temp_directory_path();
  write_image_metas(dir / "satstereo_metas.txt", metas);
  const auto back = read_image_metas(dir / "satstereo_metas.txt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "v0");
  CHECK(back[1].geom.azimuth_deg == 310.125);
  CHECK(back[1].geom.elevation_deg == 64.0625);
  CHECK(back[0].geom.acquisition_time == "2016-01-01T10:00:00Z");

  SelectionConfig cfg;
  const auto pairs = select_pairs(metas, cfg);
  write_pair_records(dir / "satstereo_pairs.txt", pairs);
  const auto pback = read_pair_records(dir / "satstereo_pairs.txt");
  REQUIRE(pback.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pback[i].id_a == pairs[i].id_a);
    CHECK(pback[i].tau_days == pairs[i].tau_days);
    CHECK(pback[i].theta_deg == pairs[i].theta_deg);
  }
  std::filesystem::remove(dir / "satstereo_metas.txt");
  std::filesystem::remove(dir / "satstereo_pairs.txt");
}
