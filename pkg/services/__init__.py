"""GP-CCM / VGP-CCM services: preprocessing, GP algebra, variational fits, tests, simulators and reporting."""
