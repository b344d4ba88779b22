#include <catch2/catch_amalgamated.hpp>
#include "tandem/cli.hpp"

TEST_CASE("headers compile") { REQUIRE(true); }
