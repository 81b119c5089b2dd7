#include "saml/cli.hpp"

int main(int argc, char ** argv) {
    return saml::run_cli(argc, argv);
}
