# Utilitaires du laboratoire
