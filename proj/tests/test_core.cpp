#include "coophaul/core.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace coophaul;

TEST_CASE("rng streams are reproducible and derived seeds differ")
{
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next() == b.next());
    }
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("uniform and normal draws have the right moments")
{
    Rng rng(5);
    const int n = 200000;
    double su = 0.0, sn = 0.0, sn2 = 0.0, sc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
        sc += std::norm(rng.complex_normal());
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(std::abs(sn / n) < 0.01);
    CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(sc / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("block structure from an association")
{
    const auto blocks = BlockStructure::from_association(3, 2, {2, 0, 0, 1, 2, 1});
    CHECK(blocks.num_users() == 6);
    CHECK(blocks.num_antennas() == 6);
    CHECK(blocks.users_of_bs[0] == std::vector<int>{1, 2});
    CHECK(blocks.users_of_bs[2] == std::vector<int>{0, 4});
    CHECK(blocks.first_antenna(2) == 4);
    CHECK(blocks.bs_of_antenna(3) == 1);
    CHECK_THROWS_AS(BlockStructure::from_association(2, 1, {0, 2}), InvalidInput);
    CHECK_THROWS_AS(BlockStructure::from_association(0, 1, {}), InvalidInput);
}

TEST_CASE("clustering canonical form and partition equality")
{
    const Clustering a({2, 2, 0, 1}, 3);
    const Clustering b({0, 0, 1, 2}, 3);
    CHECK(a.same_partition(b));
    CHECK(a.canonical() == b);
    CHECK_FALSE(a.same_partition(Clustering({0, 1, 1, 2}, 3)));
    const auto g = Clustering::from_groups(5, {{0, 3}, {1}, {2, 4}});
    CHECK(g.label(3) == g.label(0));
    CHECK(g.sizes() == std::vector<int>{2, 1, 2});
    CHECK(Clustering({0, 0, 2}, 3).has_empty());
    CHECK(Clustering::singletons(4).num_clusters() == 4);
    CHECK(Clustering::single(4).num_clusters() == 1);
}

TEST_CASE("key value files")
{
    std::istringstream in("# comment\nalpha = 1.5\n  list = 1, 2 ,inf  # trailing\nflag = true\nname = x y\n");
    const KeyValues kv = KeyValues::parse(in);
    CHECK(kv.number("alpha", 0.0) == 1.5);
    CHECK(kv.integer("missing", 7) == 7);
    CHECK(kv.boolean("flag", false));
    CHECK(kv.get("name") == "x y");
    const auto list = kv.numbers("list", {});
    REQUIRE(list.size() == 3);
    CHECK(std::isinf(list[2]));

    std::istringstream bad("novalue\n");
    CHECK_THROWS_AS(KeyValues::parse(bad), ConfigurationError);
    std::istringstream nan_list("x = 1, abc\n");
    CHECK_THROWS_AS(KeyValues::parse(nan_list).numbers("x", {}), ConfigurationError);
    CHECK_THROWS_AS(KeyValues::load("/nonexistent/file.spec"), ConfigurationError);
}
